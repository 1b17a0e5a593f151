use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::MlpConfig;
use super::optim::Sgd;
use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::data::LabeledSet;
use crate::error::{Error, Result};

/// Affine layer `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `±1/√fan_in` for the weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("positive dims"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLinear<'t> {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Inverted-dropout mask: kept units are scaled by `1/(1-p)`.
fn dropout_mask(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *m = keep;
        }
    }
    mask
}

/// Hidden stack: `relu(x·W + b)` per layer, with optional dropout after each
/// activation. Returns the input itself when there are no hidden layers.
pub(crate) fn trunk_forward<'t>(
    layers: &[BoundLinear<'t>],
    x: Var<'t>,
    dropout_p: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var<'t>> {
    let mut h = x;
    for layer in layers {
        h = layer.apply(h)?.relu()?;
        if dropout_p > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                let mask = h.tape().constant(dropout_mask(&h.shape(), dropout_p, rng));
                h = h.mul(&mask)?;
            }
        }
    }
    Ok(h)
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (rows, cols) = (shape[0], shape[1]);
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut onehot = Tensor::zeros(&[rows, cols]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(Error::Usage(format!("label {l} outside [0,{cols})")));
        }
        onehot.data_mut()[r * cols + l] = 1.0;
    }
    let onehot = logits.tape().constant(onehot);
    logits
        .log_softmax_temp(1.0)?
        .mul(&onehot)?
        .sum()?
        .scale(-1.0 / rows as f64)
}

pub(crate) fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        1 => x.clone().reshape(vec![1, x.numel()]),
        2 => Ok(x.clone()),
        _ => Err(Error::Shape(format!(
            "expected a matrix, got shape {:?}",
            x.shape()
        ))),
    }
}

pub(crate) fn check_input(x: &Tensor, input_dim: usize) -> Result<Tensor> {
    let x = as_matrix(x)?;
    if x.cols() != input_dim {
        return Err(Error::Shape(format!(
            "model expects {input_dim} input features, got {}",
            x.cols()
        )));
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Softmax MLP classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    config: MlpConfig,
    hidden: Vec<Linear>,
    output: Linear,
    mode: Mode,
}

/// Values produced by one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub posteriors: Tensor,
    /// Last hidden activation `z`, or the input when there are no hidden
    /// layers.
    pub hidden: Tensor,
}

pub(crate) struct BoundClassifier<'t> {
    pub hidden: Vec<BoundLinear<'t>>,
    pub output: BoundLinear<'t>,
}

/// Loss per epoch; entry 0 is the loss before the first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("non-empty trace")
    }
}

impl Classifier {
    /// Seeded initialization from `config.seed`.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        for &width in &config.hidden_dims {
            hidden.push(Linear::init(fan_in, width, &mut rng));
            fan_in = width;
        }
        let output = Linear::init(fan_in, config.num_classes, &mut rng);
        Ok(Classifier {
            config,
            hidden,
            output,
            mode: Mode::Eval,
        })
    }

    /// All weights and biases zero; posteriors are uniform for any input.
    pub fn zeroed(config: MlpConfig) -> Result<Self> {
        let mut clf = Classifier::new(config)?;
        for layer in clf
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut clf.output))
        {
            *layer = Linear::zeros(layer.weight.rows(), layer.weight.cols());
        }
        Ok(clf)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundClassifier<'t> {
        BoundClassifier {
            hidden: self
                .hidden
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
            output: self.output.bind(tape, trainable),
        }
    }

    /// Records a forward pass on `x`'s tape and returns `(logits, hidden)`.
    pub(crate) fn forward_on<'t>(
        &self,
        params: &BoundClassifier<'t>,
        x: Var<'t>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hidden = trunk_forward(&params.hidden, x, self.config.dropout_p, rng)?;
        let logits = params.output.apply(hidden)?;
        Ok((logits, hidden))
    }

    /// Forward pass over a `B × D` batch. Dropout is sampled from `rng` only
    /// when `dropout_active` is set and `dropout_p > 0`.
    pub fn forward<R: RngCore>(
        &self,
        x: &Tensor,
        tau: f64,
        dropout_active: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let rng: Option<&mut dyn RngCore> = if dropout_active { Some(rng) } else { None };
        self.forward_impl(x, tau, rng)
    }

    /// Deterministic (dropout-free) forward pass.
    pub fn predict(&self, x: &Tensor, tau: f64) -> Result<ForwardOutput> {
        self.forward_impl(x, tau, None)
    }

    fn forward_impl(
        &self,
        x: &Tensor,
        tau: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let x = check_input(x, self.config.input_dim)?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let (logits, hidden) = self.forward_on(&params, tape.constant(x), rng)?;
        let logits = logits.value();
        Ok(ForwardOutput {
            posteriors: softmax_rows(&logits, tau)?,
            logits,
            hidden: hidden.value(),
        })
    }

    /// Mean cross-entropy over `data` without dropout.
    pub fn loss(&self, data: &LabeledSet) -> Result<f64> {
        let x = check_input(data.features(), self.config.input_dim)?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let (logits, _) = self.forward_on(&params, tape.constant(x), None)?;
        Ok(cross_entropy(logits, data.labels())?.item())
    }

    /// Fraction of `data` classified correctly without dropout.
    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        let out = self.predict(data.features(), 1.0)?;
        let correct = out
            .logits
            .row_iter()
            .zip(data.labels())
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Minibatch SGD for `config.epochs` epochs, shuffling with a stream
    /// derived from `config.seed`.
    pub fn train(&mut self, data: &LabeledSet) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Usage("empty dataset".into()));
        }
        if data.dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input features, data has {}",
                self.config.input_dim,
                data.dim()
            )));
        }
        if data.num_classes() > self.config.num_classes
            || data.labels().iter().any(|&l| l >= self.config.num_classes)
        {
            return Err(Error::Usage(format!(
                "labels must lie in [0,{})",
                self.config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        let mut opt = Sgd::new(
            self.config.lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let diverged = |epoch: usize, e: Error| Error::Training {
            epoch,
            message: e.to_string(),
        };

        let mut loss_trace = vec![self.loss(data).map_err(|e| diverged(0, e))?];
        self.mode = Mode::Train;
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.batch_size) {
                let x = data.features().select_rows(batch)?;
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
                self.sgd_step(&x, &labels, &mut opt, &mut rng)
                    .map_err(|e| diverged(epoch, e))?;
            }
            let loss = self.loss(data).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(diverged(epoch, Error::NonFinite("cross_entropy")));
            }
            loss_trace.push(loss);
        }
        self.mode = Mode::Eval;
        Ok(TrainReport { loss_trace })
    }

    fn sgd_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opt: &mut Sgd,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let tape = Tape::new();
        let params = self.bind(&tape, true);
        let (logits, _) = self.forward_on(&params, tape.constant(x.clone()), Some(rng))?;
        let loss = cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = params
            .hidden
            .iter()
            .chain(std::iter::once(&params.output))
            .flat_map(|l| [l.weight.grad(), l.bias.grad()])
            .map(|g| g.expect("trainable leaf reached by backward"))
            .collect();
        let mut slots: Vec<&mut Tensor> = self
            .layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        opt.step(&mut slots, &grads)?;
        if slots.iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite("sgd update"));
        }
        Ok(loss.item())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_benchmark, GaussianSpec};

    fn small_config() -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden_dims: vec![8],
            num_classes: 3,
            dropout_p: 0.0,
            epochs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_network_gives_uniform_posteriors() {
        let clf = Classifier::zeroed(small_config()).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -3.0], vec![100.0, 2.0]]).unwrap();
        let out = clf.predict(&x, 1.0).unwrap();
        for p in out.posteriors.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out.hidden.shape(), &[2, 8]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let clf = Classifier::new(small_config()).unwrap();
        let x = Tensor::zeros(&[4, 3]);
        assert!(matches!(clf.predict(&x, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_flag_is_inert_without_dropout() {
        let clf = Classifier::new(small_config()).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.5, 0.2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = clf.forward(&x, 1.0, true, &mut rng).unwrap();
        let b = clf.forward(&x, 1.0, false, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_is_reproducible_from_rng_state() {
        let clf = Classifier::new(MlpConfig {
            dropout_p: 0.5,
            ..small_config()
        })
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.5, 0.2]]).unwrap();
        let a = clf
            .forward(&x, 1.0, true, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = clf
            .forward(&x, 1.0, true, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        let c = clf.predict(&x, 1.0).unwrap();
        assert_ne!(a.hidden, c.hidden);
    }

    #[test]
    fn temperature_keeps_argmax() {
        let clf = Classifier::new(small_config()).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.5, 0.2], vec![-2.0, 4.0]]).unwrap();
        let base = clf.predict(&x, 1.0).unwrap();
        for tau in [0.1, 5.0, 1000.0] {
            let out = clf.predict(&x, tau).unwrap();
            for (a, b) in out.posteriors.row_iter().zip(base.posteriors.row_iter()) {
                assert_eq!(argmax(a), argmax(b));
            }
        }
    }

    #[test]
    fn one_step_matches_hand_computed_gradient_step() {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            dropout_p: 0.0,
            weight_decay: 0.0,
            momentum: 0.0,
            lr: 0.5,
            epochs: 1,
            batch_size: 3,
            seed: 11,
            feature_map: None,
        };
        let data = LabeledSet::from_rows(
            &[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, -1.0]],
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        let mut clf = Classifier::new(cfg).unwrap();
        let w0 = clf.output.weight.clone();
        let b0 = clf.output.bias.clone();

        // dL/dW = Xᵀ(P − Y)/N, dL/db = mean(P − Y)
        let p = softmax_rows(&data.features().matmul(&w0).unwrap(), 1.0).unwrap();
        let mut w_expected = w0.data().to_vec();
        let mut b_expected = b0.data().to_vec();
        for (i, row) in data.features().row_iter().enumerate() {
            for c in 0..2 {
                let delta = p.get(i, c) - if data.labels()[i] == c { 1.0 } else { 0.0 };
                for (j, xj) in row.iter().enumerate() {
                    w_expected[j * 2 + c] -= 0.5 * xj * delta / 3.0;
                }
                b_expected[c] -= 0.5 * delta / 3.0;
            }
        }
        clf.train(&data).unwrap();
        for (a, b) in clf.output.weight.data().iter().zip(&w_expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in clf.output.bias.data().iter().zip(&b_expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let bench = gen_gaussian_benchmark(&GaussianSpec {
            n_per_class: 200,
            ..Default::default()
        })
        .unwrap();
        let mut clf = Classifier::new(MlpConfig {
            epochs: 20,
            ..Default::default()
        })
        .unwrap();
        let report = clf.train(&bench.train).unwrap();
        assert!(report.final_loss() < report.initial_loss());
        assert!(clf.accuracy(&bench.train).unwrap() >= 0.99);
        assert_eq!(clf.mode(), Mode::Eval);
    }

    #[test]
    fn single_sample_loss_decreases_monotonically() {
        let data = LabeledSet::from_rows(&[vec![0.5, -1.0]], vec![1], 2).unwrap();
        let cfg = MlpConfig {
            epochs: 10,
            dropout_p: 0.0,
            ..Default::default()
        };
        let report = Classifier::new(cfg).unwrap().train(&data).unwrap();
        for w in report.loss_trace.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.loss_trace);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let bench = gen_gaussian_benchmark(&GaussianSpec {
            n_per_class: 50,
            ..Default::default()
        })
        .unwrap();
        let cfg = MlpConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut a = Classifier::new(cfg.clone()).unwrap();
        let mut b = Classifier::new(cfg).unwrap();
        assert_eq!(
            a.train(&bench.train).unwrap(),
            b.train(&bench.train).unwrap()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data =
            LabeledSet::from_rows(&[vec![1e3, -1e3], vec![-1e3, 1e3]], vec![0, 1], 2).unwrap();
        let cfg = MlpConfig {
            lr: 1e200,
            momentum: 0.0,
            dropout_p: 0.0,
            epochs: 5,
            ..Default::default()
        };
        match Classifier::new(cfg).unwrap().train(&data) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let data = LabeledSet::from_rows(&[vec![1.0, 0.0]], vec![2], 3).unwrap();
        let mut clf = Classifier::new(MlpConfig::default()).unwrap();
        assert!(matches!(clf.train(&data), Err(Error::Usage(_))));
    }
}
