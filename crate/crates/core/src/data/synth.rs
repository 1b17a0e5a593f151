use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledSet, Manifest, OodBenchmark, Separation};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// OOD shifts of at least this many `spread`s count as "far".
const FAR_SHIFT_IN_SPREADS: f64 = 3.0;
/// Minimum pairwise distance between ID cluster centers, in `spread`s.
const MIN_CENTER_GAP_IN_SPREADS: f64 = 6.0;
/// Scale of the normal distribution that proposes ID centers, in `spread`s.
const CENTER_SCALE_IN_SPREADS: f64 = 5.0;
const MAX_ATTEMPTS: usize = 100_000;

/// Isotropic Gaussian clusters for the ID classes plus one shifted OOD
/// cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub n_ood: usize,
    /// Distance from the OOD center to the nearest ID center.
    pub ood_shift: f64,
    /// Per-coordinate standard deviation of every cluster.
    pub spread: f64,
    pub seed: u64,
    pub normalize: bool,
    pub ood_placement: OodPlacement,
}

/// Direction in which the OOD center is offset from its anchor class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodPlacement {
    /// Toward the mean of the other class centers, into the region between
    /// classes; falls back to a random direction when that would bring
    /// another class closer than the anchor.
    #[default]
    Inward,
    /// Uniformly random direction.
    Random,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec {
            dim: 2,
            num_classes: 2,
            n_per_class: 500,
            n_test_per_class: 200,
            n_ood: 400,
            ood_shift: 10.0,
            spread: 1.0,
            seed: 0,
            normalize: true,
            ood_placement: OodPlacement::Inward,
        }
    }
}

/// Two interleaved half-moons with OOD points on an enclosing ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoonsSpec {
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub n_ood: usize,
    pub noise: f64,
    pub ood_ring_radius: f64,
    pub seed: u64,
    pub normalize: bool,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        MoonsSpec {
            n_per_class: 500,
            n_test_per_class: 200,
            n_ood: 400,
            noise: 0.1,
            ood_ring_radius: 3.0,
            seed: 0,
            normalize: true,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sample_cluster(rng: &mut ChaCha8Rng, center: &[f64], spread: f64, n: usize, out: &mut Vec<f64>) {
    for _ in 0..n {
        out.extend(
            center
                .iter()
                .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)),
        );
    }
}

fn place_centers(rng: &mut ChaCha8Rng, spec: &GaussianSpec) -> Result<Vec<Vec<f64>>> {
    let scale = CENTER_SCALE_IN_SPREADS * spec.spread;
    let gap = MIN_CENTER_GAP_IN_SPREADS * spec.spread;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand: Vec<f64> = normal_vec(rng, spec.dim)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            if centers.iter().all(|c| dist(c, &cand) >= gap) {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Usage(format!(
                "could not place {} well-separated centers in {} dims",
                spec.num_classes, spec.dim
            )));
        }
    }
    Ok(centers)
}

fn offset(anchor: &[f64], dir: &[f64], shift: f64) -> Option<Vec<f64>> {
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| {
        anchor
            .iter()
            .zip(dir)
            .map(|(a, d)| a + shift * d / norm)
            .collect()
    })
}

/// The anchor must remain the nearest ID center.
fn anchor_is_nearest(centers: &[Vec<f64>], cand: &[f64], shift: f64) -> bool {
    centers
        .iter()
        .all(|c| dist(c, cand) >= shift * (1.0 - 1e-12))
}

fn place_ood_center(
    rng: &mut ChaCha8Rng,
    centers: &[Vec<f64>],
    shift: f64,
    placement: OodPlacement,
) -> Result<Vec<f64>> {
    if placement == OodPlacement::Inward {
        let first = rng.random_range(0..centers.len());
        for k in 0..centers.len() {
            let a = (first + k) % centers.len();
            let dim = centers[a].len();
            let others = centers.len() - 1;
            let toward: Vec<f64> = (0..dim)
                .map(|j| {
                    let m = centers
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != a)
                        .map(|(_, c)| c[j])
                        .sum::<f64>();
                    m / others as f64 - centers[a][j]
                })
                .collect();
            if let Some(cand) = offset(&centers[a], &toward, shift) {
                if anchor_is_nearest(centers, &cand, shift) {
                    return Ok(cand);
                }
            }
        }
    }
    for _ in 0..MAX_ATTEMPTS {
        let anchor = &centers[rng.random_range(0..centers.len())];
        let dir = normal_vec(rng, anchor.len());
        if let Some(cand) = offset(anchor, &dir, shift) {
            if anchor_is_nearest(centers, &cand, shift) {
                return Ok(cand);
            }
        }
    }
    Err(Error::Usage(format!(
        "could not place an OOD center at distance {shift} from the nearest ID center"
    )))
}

/// Seeded Gaussian-cluster benchmark. Large `ood_shift` gives a well separated
/// ("far") OOD set, small shifts an overlapping one.
pub fn gen_gaussian_benchmark(spec: &GaussianSpec) -> Result<OodBenchmark> {
    if spec.n_per_class < 1 || spec.n_test_per_class < 1 || spec.n_ood < 1 {
        return Err(Error::Usage("sample counts must be at least 1".into()));
    }
    if spec.dim == 0 || spec.num_classes < 2 {
        return Err(Error::Usage("need dim >= 1 and at least 2 classes".into()));
    }
    if !(spec.ood_shift >= 0.0 && spec.ood_shift.is_finite()) {
        return Err(Error::Usage(format!(
            "ood_shift must be >= 0, got {}",
            spec.ood_shift
        )));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(Error::Usage(format!(
            "spread must be positive, got {}",
            spec.spread
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_centers(&mut rng, spec)?;
    let ood_center = place_ood_center(&mut rng, &centers, spec.ood_shift, spec.ood_placement)?;

    let split = |rng: &mut ChaCha8Rng, n: usize| -> Result<LabeledSet> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            sample_cluster(rng, center, spec.spread, n, &mut data);
            labels.extend(std::iter::repeat_n(c, n));
        }
        LabeledSet::new(
            Tensor::matrix(labels.len(), spec.dim, data)?,
            labels,
            spec.num_classes,
        )
    };
    let train = split(&mut rng, spec.n_per_class)?;
    let test_id = split(&mut rng, spec.n_test_per_class)?;
    let mut ood = Vec::new();
    sample_cluster(&mut rng, &ood_center, spec.spread, spec.n_ood, &mut ood);
    let test_ood = Tensor::matrix(spec.n_ood, spec.dim, ood)?;

    let separation = if spec.ood_shift >= FAR_SHIFT_IN_SPREADS * spec.spread {
        Separation::Far
    } else {
        Separation::Overlapping
    };
    let bench = OodBenchmark {
        train,
        test_id,
        test_ood,
        separation,
        seed: spec.seed,
        manifest: Manifest {
            generator: "gaussian".into(),
            args: serde_json::to_value(spec)?,
            seed: spec.seed,
        },
    };
    if spec.normalize {
        bench.normalize()
    } else {
        Ok(bench)
    }
}

fn moon_point(class: usize, t: f64) -> [f64; 2] {
    match class {
        0 => [t.cos(), t.sin()],
        _ => [1.0 - t.cos(), 0.5 - t.sin()],
    }
}

/// Center of the two-moons layout; the OOD ring is drawn around it.
pub(crate) const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

/// Seeded two-moons benchmark.
pub fn gen_moons_benchmark(spec: &MoonsSpec) -> Result<OodBenchmark> {
    if spec.n_per_class < 1 || spec.n_test_per_class < 1 || spec.n_ood < 1 {
        return Err(Error::Usage("sample counts must be at least 1".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Usage(format!(
            "noise must be >= 0, got {}",
            spec.noise
        )));
    }
    if !(spec.ood_ring_radius >= 0.0 && spec.ood_ring_radius.is_finite()) {
        return Err(Error::Usage("ood_ring_radius must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = |rng: &mut ChaCha8Rng, p: [f64; 2]| -> [f64; 2] {
        if spec.noise == 0.0 {
            p
        } else {
            [
                p[0] + spec.noise * rng.sample::<f64, _>(StandardNormal),
                p[1] + spec.noise * rng.sample::<f64, _>(StandardNormal),
            ]
        }
    };
    let split = |rng: &mut ChaCha8Rng, n: usize| -> Result<LabeledSet> {
        let mut data = Vec::with_capacity(4 * n);
        let mut labels = Vec::with_capacity(2 * n);
        for class in 0..2 {
            for _ in 0..n {
                let t = rng.random_range(0.0..=std::f64::consts::PI);
                data.extend(jitter(rng, moon_point(class, t)));
                labels.push(class);
            }
        }
        LabeledSet::new(Tensor::matrix(2 * n, 2, data)?, labels, 2)
    };
    let train = split(&mut rng, spec.n_per_class)?;
    let test_id = split(&mut rng, spec.n_test_per_class)?;
    let mut ood = Vec::with_capacity(2 * spec.n_ood);
    for _ in 0..spec.n_ood {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let p = [
            MOONS_CENTER[0] + spec.ood_ring_radius * a.cos(),
            MOONS_CENTER[1] + spec.ood_ring_radius * a.sin(),
        ];
        ood.extend(jitter(&mut rng, p));
    }
    let test_ood = Tensor::matrix(spec.n_ood, 2, ood)?;
    // the moons span roughly 1.5 units from their center
    let separation = if spec.ood_ring_radius >= 1.5 + 3.0 * spec.noise {
        Separation::Far
    } else {
        Separation::Overlapping
    };
    let bench = OodBenchmark {
        train,
        test_id,
        test_ood,
        separation,
        seed: spec.seed,
        manifest: Manifest {
            generator: "moons".into(),
            args: serde_json::to_value(spec)?,
            seed: spec.seed,
        },
    };
    if spec.normalize {
        bench.normalize()
    } else {
        Ok(bench)
    }
}
