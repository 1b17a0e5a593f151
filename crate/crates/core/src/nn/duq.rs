use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DuqConfig, MlpConfig};
use super::mlp::{argmax, check_input, trunk_forward, BoundLinear, Linear, TrainReport};
use super::optim::Sgd;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::LabeledSet;
use crate::error::{Error, Result};

/// Keeps `log(1 − K)` finite when a sample sits exactly on its centroid.
const LOG_GUARD: f64 = 1e-12;

/// Per-class linear embeddings and RBF centroids.
///
/// `weights[c]` is stored `F × E` so that the embedding of a feature row `f`
/// is the row product `f · weights[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuqHead {
    pub weights: Vec<Tensor>,
    pub centroids: Vec<Vec<f64>>,
    pub length_scale: f64,
    pub centroid_momentum: f64,
    pub penalty_weight: f64,
    pub fd_epsilon: f64,
}

impl DuqHead {
    pub fn new(
        feature_dim: usize,
        num_classes: usize,
        config: &DuqConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let emb = config.resolved_embedding_dim(feature_dim);
        let weights = (0..num_classes)
            .map(|_| Linear::init(feature_dim, emb, rng).weight)
            .collect();
        Ok(DuqHead {
            weights,
            centroids: vec![vec![0.0; emb]; num_classes],
            length_scale: config.resolved_length_scale(feature_dim),
            centroid_momentum: config.centroid_momentum,
            penalty_weight: config.penalty_weight,
            fd_epsilon: config.fd_epsilon,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights[0].cols()
    }

    fn check(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if self.weights.is_empty() || self.weights.len() != self.centroids.len() {
            return Err(Error::Parameter(
                "need one centroid per class weight".into(),
            ));
        }
        Ok(())
    }

    /// Scaled squared distances `‖f·W_c − μ_c‖² / (2σ²)`, one `B × 1`
    /// column per class.
    fn scaled_distances<'t>(&self, features: Var<'t>, weights: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let tape = features.tape();
        let inv_two_sigma_sq = 1.0 / (2.0 * self.length_scale * self.length_scale);
        weights
            .iter()
            .zip(&self.centroids)
            .map(|(w, mu)| {
                let neg_mu = Tensor::matrix(1, mu.len(), mu.iter().map(|v| -v).collect())?;
                features
                    .matmul(w)?
                    .add_row(&tape.constant(neg_mu))?
                    .square()?
                    .row_sums()?
                    .scale(inv_two_sigma_sq)
            })
            .collect()
    }

    /// `B × C` kernel matrix on the tape.
    fn kernels_on<'t>(&self, features: Var<'t>, weights: &[Var<'t>]) -> Result<Var<'t>> {
        let cols = self
            .scaled_distances(features, weights)?
            .into_iter()
            .map(|d| d.neg()?.exp())
            .collect::<Result<Vec<_>>>()?;
        Var::concat_cols(&cols)
    }
}

/// RBF kernel values `K[b,c] = exp(−‖f_b·W_c − μ_c‖² / (2σ²))` for a batch of
/// feature rows, floored at the smallest normal `f64` so that far-away inputs
/// keep a strictly positive value.
pub fn duq_forward(head: &DuqHead, features: &Tensor) -> Result<Tensor> {
    head.check()?;
    let features = super::mlp::as_matrix(features)?;
    if features.cols() != head.feature_dim() {
        return Err(Error::Shape(format!(
            "head expects {} features, got {}",
            head.feature_dim(),
            features.cols()
        )));
    }
    let tape = Tape::new();
    let weights: Vec<Var> = head
        .weights
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let k = head.kernels_on(tape.constant(features), &weights)?.value();
    Ok(k.map(|v| v.max(f64::MIN_POSITIVE)))
}

/// Loss components of one DUQ update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuqStepLoss {
    pub bce: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Feature extractor (the hidden stack of an MLP) followed by a DUQ head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuqModel {
    config: MlpConfig,
    trunk: Vec<Linear>,
    pub head: DuqHead,
}

struct BoundDuq<'t> {
    trunk: Vec<BoundLinear<'t>>,
    weights: Vec<Var<'t>>,
}

impl DuqModel {
    /// Seeded initialization. Dropout settings in `config` are ignored and
    /// its learning rate is replaced by `duq.lr`.
    pub fn new(mut config: MlpConfig, duq: &DuqConfig) -> Result<Self> {
        duq.validate()?;
        config.lr = duq.lr;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fan_in = config.input_dim;
        let mut trunk = Vec::with_capacity(config.hidden_dims.len());
        for &width in &config.hidden_dims {
            trunk.push(Linear::init(fan_in, width, &mut rng));
            fan_in = width;
        }
        let head = DuqHead::new(fan_in, config.num_classes, duq, &mut rng)?;
        Ok(DuqModel {
            config,
            trunk,
            head,
        })
    }

    /// Model with explicit trunk layers and head, for frozen or hand-built
    /// feature maps.
    pub fn from_parts(config: MlpConfig, trunk: Vec<Linear>, head: DuqHead) -> Result<Self> {
        config.validate()?;
        if trunk.len() != config.hidden_dims.len() || head.num_classes() != config.num_classes {
            return Err(Error::Shape("trunk or head does not match config".into()));
        }
        if head.feature_dim() != config.feature_dim() {
            return Err(Error::Shape(
                "head feature width does not match trunk".into(),
            ));
        }
        Ok(DuqModel {
            config,
            trunk,
            head,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDuq<'t> {
        BoundDuq {
            trunk: self.trunk.iter().map(|l| l.bind(tape, trainable)).collect(),
            weights: self
                .head
                .weights
                .iter()
                .map(|w| tape.leaf(w.clone(), trainable))
                .collect(),
        }
    }

    fn features_on<'t>(&self, p: &BoundDuq<'t>, x: Var<'t>) -> Result<Var<'t>> {
        trunk_forward(&p.trunk, x, 0.0, None)
    }

    /// Feature rows `z` for a batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let x = check_input(x, self.config.input_dim)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.features_on(&p, tape.constant(x))?.value())
    }

    /// `B × C` kernel values for a batch of inputs.
    pub fn kernels(&self, x: &Tensor) -> Result<Tensor> {
        duq_forward(&self.head, &self.features(x)?)
    }

    /// Embeddings `f·W_c` for every class, each `B × E`.
    fn embeddings(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let f = self.features(x)?;
        self.head.weights.iter().map(|w| f.matmul(w)).collect()
    }

    /// Central-difference columns `∂S/∂x_d` of `S(x) = Σ_c K_c(x)`, each
    /// `B × 1` and differentiable through the bound parameters.
    fn fd_input_gradient<'t>(&self, p: &BoundDuq<'t>, x: &Tensor) -> Result<Vec<Var<'t>>> {
        let tape = p.weights[0].tape();
        let eps = self.head.fd_epsilon;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Parameter(format!(
                "fd_epsilon must be positive, got {eps}"
            )));
        }
        let d = x.cols();
        let kernel_sum = |shifted: Tensor| -> Result<Var<'t>> {
            let f = self.features_on(p, tape.constant(shifted))?;
            self.head.kernels_on(f, &p.weights)?.row_sums()
        };
        (0..d)
            .map(|j| {
                let mut plus = x.clone();
                let mut minus = x.clone();
                for r in 0..x.rows() {
                    plus.data_mut()[r * d + j] += eps;
                    minus.data_mut()[r * d + j] -= eps;
                }
                kernel_sum(plus)?
                    .sub(&kernel_sum(minus)?)?
                    .scale(1.0 / (2.0 * eps))
            })
            .collect()
    }

    /// Finite-difference input gradient of `Σ_c K_c`, as a `B × D` matrix.
    pub fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        let x = check_input(x, self.config.input_dim)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let cols = self.fd_input_gradient(&p, &x)?;
        Ok(Var::concat_cols(&cols)?.value())
    }

    fn loss_on<'t>(
        &self,
        p: &BoundDuq<'t>,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(Var<'t>, f64, f64)> {
        let tape = p.weights[0].tape();
        let c = self.num_classes();
        let (b, _) = (x.rows(), x.cols());
        let mut onehot = Tensor::zeros(&[b, c]);
        for (r, &l) in labels.iter().enumerate() {
            onehot.data_mut()[r * c + l] = 1.0;
        }
        let complement = onehot.map(|v| 1.0 - v);
        let f = self.features_on(p, tape.constant(x.clone()))?;
        let dists = self.head.scaled_distances(f, &p.weights)?;
        // log K = −d exactly; log(1 − K) is guarded away from log 0
        let log_k = Var::concat_cols(&dists)?.neg()?;
        let log_1mk = log_k.exp()?.neg()?.add_scalar(1.0 + LOG_GUARD)?.log()?;
        let bce = log_k
            .mul(&tape.constant(onehot))?
            .add(&log_1mk.mul(&tape.constant(complement))?)?
            .mean()?
            .neg()?;
        if self.head.penalty_weight == 0.0 {
            let v = bce.item();
            return Ok((bce, v, 0.0));
        }
        let grads = self.fd_input_gradient(p, x)?;
        let mut sq_norm = grads[0].square()?;
        for g in &grads[1..] {
            sq_norm = sq_norm.add(&g.square()?)?;
        }
        let penalty = sq_norm.add_scalar(-1.0)?.square()?.mean()?;
        let total = bce.add(&penalty.scale(self.head.penalty_weight)?)?;
        Ok((total, bce.item(), penalty.item()))
    }

    /// Mean loss over a labeled set without updating anything.
    pub fn loss(&self, data: &LabeledSet) -> Result<DuqStepLoss> {
        let x = check_input(data.features(), self.config.input_dim)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let (total, bce, penalty) = self.loss_on(&p, &x, data.labels())?;
        Ok(DuqStepLoss {
            bce,
            penalty,
            total: total.item(),
        })
    }

    /// One SGD update of trunk and class weights, followed by the centroid
    /// moving-average update on the same batch.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opt: &mut Sgd,
    ) -> Result<DuqStepLoss> {
        let x = check_input(x, self.config.input_dim)?;
        if labels.len() != x.rows() {
            return Err(Error::Shape("labels do not match batch".into()));
        }
        if labels.iter().any(|&l| l >= self.num_classes()) {
            return Err(Error::Usage("label out of range".into()));
        }
        let tape = Tape::new();
        let p = self.bind(&tape, true);
        let (total, bce, penalty) = self.loss_on(&p, &x, labels)?;
        tape.backward(total)?;
        let grads: Vec<Tensor> = p
            .trunk
            .iter()
            .flat_map(|l| [l.weight.grad(), l.bias.grad()])
            .chain(p.weights.iter().map(|w| w.grad()))
            .map(|g| g.expect("trainable leaf reached by backward"))
            .collect();
        let mut slots: Vec<&mut Tensor> = self
            .trunk
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.head.weights.iter_mut())
            .collect();
        opt.step(&mut slots, &grads)?;
        if slots.iter().any(|s| !s.all_finite()) {
            return Err(Error::NonFinite("duq update"));
        }
        self.update_centroids(&x, labels)?;
        Ok(DuqStepLoss {
            bce,
            penalty,
            total: total.item(),
        })
    }

    /// `μ_c ← γ·μ_c + (1 − γ)·mean_{b: y_b = c} f_b·W_c`; classes absent from
    /// the batch keep their centroid.
    pub fn update_centroids(&mut self, x: &Tensor, labels: &[usize]) -> Result<()> {
        let gamma = self.head.centroid_momentum;
        let embeddings = self.embeddings(x)?;
        for (c, emb) in embeddings.iter().enumerate() {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            let mean = column_means(emb, &rows);
            for (mu, m) in self.head.centroids[c].iter_mut().zip(mean) {
                *mu = gamma * *mu + (1.0 - gamma) * m;
            }
        }
        Ok(())
    }

    /// Sets every centroid to the mean embedding of its class.
    pub fn init_centroids(&mut self, data: &LabeledSet) -> Result<()> {
        let embeddings = self.embeddings(data.features())?;
        for (c, emb) in embeddings.iter().enumerate() {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == c).collect();
            if rows.is_empty() {
                return Err(Error::Fit(format!("class {c} has no training samples")));
            }
            self.head.centroids[c] = column_means(emb, &rows);
        }
        Ok(())
    }

    /// Centroid initialization followed by `config.epochs` epochs of
    /// [`DuqModel::train_step`]. The trace holds the mean batch loss per
    /// epoch after the initial full-data loss.
    pub fn train(&mut self, data: &LabeledSet) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Usage("empty dataset".into()));
        }
        if data.dim() != self.config.input_dim {
            return Err(Error::Shape("data width does not match model".into()));
        }
        self.init_centroids(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let mut opt = Sgd::new(
            self.config.lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let diverged = |epoch, e: Error| Error::Training {
            epoch,
            message: e.to_string(),
        };
        let mut loss_trace = vec![self.loss(data).map_err(|e| diverged(0, e))?.total];
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for batch in order.chunks(self.config.batch_size) {
                let x = data.features().select_rows(batch)?;
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
                let step = self
                    .train_step(&x, &labels, &mut opt)
                    .map_err(|e| diverged(epoch, e))?;
                sum += step.total;
                batches += 1;
            }
            let mean = sum / batches as f64;
            if !mean.is_finite() {
                return Err(diverged(epoch, Error::NonFinite("duq loss")));
            }
            loss_trace.push(mean);
        }
        Ok(TrainReport { loss_trace })
    }

    /// `(max_c K_c, argmax_c K_c)` per input row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<(f64, usize)>> {
        let k = self.kernels(x)?;
        Ok(k.row_iter()
            .map(|row| {
                let c = argmax(row);
                (row[c], c)
            })
            .collect())
    }

    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        let preds = self.predict(data.features())?;
        let correct = preds
            .iter()
            .zip(data.labels())
            .filter(|((_, p), l)| p == *l)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

fn column_means(m: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for &r in rows {
        mean.iter_mut().zip(m.row(r)).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= rows.len() as f64);
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(weights: Vec<Tensor>, centroids: Vec<Vec<f64>>, sigma: f64) -> DuqModel {
        let d = weights[0].rows();
        let c = weights.len();
        let cfg = MlpConfig {
            input_dim: d,
            hidden_dims: vec![],
            num_classes: c,
            ..Default::default()
        };
        let head = DuqHead {
            weights,
            centroids,
            length_scale: sigma,
            centroid_momentum: 0.9,
            penalty_weight: 0.5,
            fd_epsilon: 1e-4,
        };
        DuqModel::from_parts(cfg, vec![], head).unwrap()
    }

    #[test]
    fn kernel_is_one_at_the_centroid() {
        let m = linear_model(
            vec![Tensor::eye(2), Tensor::eye(2)],
            vec![vec![1.0, 2.0], vec![-1.0, 0.0]],
            0.7,
        );
        let k = m
            .kernels(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())
            .unwrap();
        assert_eq!(k.get(0, 0), 1.0);
        assert!(k.get(0, 1) < 1.0 && k.get(0, 1) > 0.0);
    }

    #[test]
    fn kernel_at_sigma_root_two_is_inverse_e() {
        let sigma = 0.3;
        let m = linear_model(
            vec![Tensor::eye(2), Tensor::eye(2)],
            vec![vec![0.0, 0.0], vec![5.0, 5.0]],
            sigma,
        );
        let x = Tensor::from_rows(&[vec![sigma * 2f64.sqrt(), 0.0]]).unwrap();
        let k = m.kernels(&x).unwrap();
        assert!((k.get(0, 0) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_length_scale_is_rejected() {
        let mut m = linear_model(
            vec![Tensor::eye(1), Tensor::eye(1)],
            vec![vec![0.0], vec![1.0]],
            1.0,
        );
        m.head.length_scale = 0.0;
        assert!(matches!(
            duq_forward(&m.head, &Tensor::zeros(&[1, 1])),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn fd_gradient_matches_analytic_on_linear_map() {
        let a0 = Tensor::from_rows(&[vec![1.0, 0.5, -0.2], vec![0.3, -1.0, 0.8]]).unwrap();
        let a1 = Tensor::from_rows(&[vec![-0.4, 0.9, 0.1], vec![0.7, 0.2, -0.6]]).unwrap();
        let mus = vec![vec![0.2, -0.1, 0.4], vec![-0.3, 0.5, 0.0]];
        let sigma = 0.8;
        let m = linear_model(vec![a0.clone(), a1.clone()], mus.clone(), sigma);
        let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.6]]).unwrap();
        let fd = m.input_gradient(&x).unwrap();
        for (r, xr) in x.row_iter().enumerate() {
            // ∇_x K_c = −K_c/σ² · W_c (x·W_c − μ_c)
            let mut analytic = [0.0; 2];
            for (w, mu) in [&a0, &a1].into_iter().zip(&mus) {
                let e: Vec<f64> = (0..3)
                    .map(|k| xr[0] * w.get(0, k) + xr[1] * w.get(1, k) - mu[k])
                    .collect();
                let kc = (-e.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma)).exp();
                for (j, a) in analytic.iter_mut().enumerate() {
                    *a -= kc / (sigma * sigma) * (0..3).map(|k| w.get(j, k) * e[k]).sum::<f64>();
                }
            }
            let got = fd.row(r);
            let num = ((got[0] - analytic[0]).powi(2) + (got[1] - analytic[1]).powi(2)).sqrt();
            let den = (analytic[0].powi(2) + analytic[1].powi(2)).sqrt();
            assert!(num / den <= 1e-6, "row {r}: {got:?} vs {analytic:?}");
        }
    }

    #[test]
    fn centroid_ema_endpoints() {
        let mut m = linear_model(
            vec![Tensor::eye(2), Tensor::eye(2)],
            vec![vec![1.0, 1.0], vec![3.0, 3.0]],
            1.0,
        );
        let x = Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        m.head.centroid_momentum = 1.0;
        m.update_centroids(&x, &[0, 0]).unwrap();
        assert_eq!(m.head.centroids, vec![vec![1.0, 1.0], vec![3.0, 3.0]]);

        m.head.centroid_momentum = 0.0;
        m.update_centroids(
            &Tensor::from_rows(&[vec![0.0, 4.0], vec![2.0, 0.0]]).unwrap(),
            &[0, 0],
        )
        .unwrap();
        assert_eq!(m.head.centroids[0], vec![1.0, 2.0]);
        // class 1 absent from the batch
        assert_eq!(m.head.centroids[1], vec![3.0, 3.0]);
    }

    #[test]
    fn zero_penalty_weight_is_pure_bce() {
        let mut m = linear_model(
            vec![Tensor::eye(2), Tensor::eye(2)],
            vec![vec![0.5, 0.0], vec![-0.5, 0.0]],
            0.5,
        );
        let data =
            LabeledSet::from_rows(&[vec![0.4, 0.1], vec![-0.6, 0.2]], vec![0, 1], 2).unwrap();
        let with = m.loss(&data).unwrap();
        assert!(with.penalty > 0.0);
        assert!((with.total - (with.bce + 0.5 * with.penalty)).abs() < 1e-12);
        m.head.penalty_weight = 0.0;
        let without = m.loss(&data).unwrap();
        assert_eq!(without.penalty, 0.0);
        assert_eq!(without.total, without.bce);
        assert_eq!(without.bce, with.bce);
    }

    #[test]
    fn score_in_unit_interval_and_prediction_at_centroid() {
        let m = linear_model(
            vec![Tensor::eye(2), Tensor::eye(2), Tensor::eye(2)],
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]],
            0.5,
        );
        let preds = m
            .predict(&Tensor::from_rows(&[vec![0.0, 2.0], vec![30.0, -4.0]]).unwrap())
            .unwrap();
        assert_eq!(preds[0], (1.0, 2));
        for (s, _) in preds {
            assert!(s <= 1.0 && s > 0.0);
        }
    }
}
