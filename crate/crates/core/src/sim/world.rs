//! The fixed task an experiment runs on: teacher, query clusters, bucket
//! model, held-out sample and probe parameters. A world depends only on the
//! master seed and the task fields of the config, never on the regime or on
//! (K, T), so every grid point is measured against the same task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, TeacherKind};
use crate::bucketing::{BucketMode, BucketModel};
use crate::error::{LadsError, Result};
use crate::linalg::Matrix;
use crate::noise::{gaussian_noise, keyed_mix, Seed};
use crate::softmax::{self, Params};
use crate::stats::std_normal_cdf;
use crate::teacher::{LinearGaussianTeacher, SoftmaxTokenTeacher};

const TAG_TEACHER: u64 = 1;
const TAG_CENTERS: u64 = 2;
const TAG_PROBES: u64 = 3;
const TAG_HOLDOUT: u64 = 4;
const TAG_LSH: u64 = 5;
pub(crate) const TAG_REPETITION: u64 = 6;

/// Independent sub-seed of the master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    keyed_mix(tag, master)
}

#[derive(Debug, Clone)]
pub enum TaskTeacher {
    Token(SoftmaxTokenTeacher),
    Linear(LinearGaussianTeacher),
}

/// Monte Carlo population loss with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationLoss {
    pub mean: f64,
    pub std_error: f64,
}

/// Fresh i.i.d. queries with the teacher's full conditional distribution at
/// each, so the loss is exact over the response and sampled over queries.
#[derive(Debug, Clone)]
pub struct Holdout {
    dim: usize,
    vocab: usize,
    xs: Vec<f64>,
    probs: Vec<f64>,
}

impl Holdout {
    pub fn new(teacher: &SoftmaxTokenTeacher, queries: &[Vec<f64>]) -> Self {
        let (dim, vocab) = (teacher.q_dim(), teacher.vocab());
        let mut xs = Vec::with_capacity(queries.len() * dim);
        let mut probs = Vec::with_capacity(queries.len() * vocab);
        for q in queries {
            xs.extend_from_slice(q);
            probs.extend(teacher.probs(q));
        }
        Self { dim, vocab, xs, probs }
    }

    pub fn len(&self) -> usize {
        self.xs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn population_loss(&self, theta: &Params) -> PopulationLoss {
        let n = self.len();
        let mut z = vec![0.0; self.vocab];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            theta.mul_vec_into(self.query(i), &mut z);
            let lse = softmax::log_sum_exp(&z);
            let l: f64 = self.probs(i).iter().zip(&z).map(|(p, zi)| p * (lse - zi)).sum();
            sum += l;
            sum_sq += l * l;
        }
        let mean = sum / n as f64;
        let var = ((sum_sq / n as f64) - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0).max(1.0);
        PopulationLoss {
            mean,
            std_error: (var / n as f64).sqrt(),
        }
    }

    /// Probability that the argmax of `theta` matches a teacher sample.
    pub fn accuracy(&self, theta: &Params) -> f64 {
        let mut z = vec![0.0; self.vocab];
        let mut acc = 0.0;
        for i in 0..self.len() {
            theta.mul_vec_into(self.query(i), &mut z);
            acc += self.probs(i)[softmax::argmax(&z)];
        }
        acc / self.len() as f64
    }

    /// Accuracy of the Bayes-optimal predictor, `E max_y p(y | q)`.
    pub fn bayes_accuracy(&self) -> f64 {
        (0..self.len())
            .map(|i| self.probs(i).iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Loss of the teacher itself: the mean conditional entropy, a floor
    /// for every student.
    pub fn bayes_loss(&self) -> f64 {
        let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
        (0..self.len()).map(|i| entropy(self.probs(i))).sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub theta: Params,
    pub population: PopulationLoss,
}

#[derive(Debug, Clone)]
pub struct World {
    pub teacher: TaskTeacher,
    pub centers: Vec<Vec<f64>>,
    pub bucket_model: BucketModel,
    /// Present for the token teacher only.
    pub holdout: Option<Holdout>,
    pub probes: Vec<Probe>,
}

/// Maps a standard normal block of length `q_dim + 1` to a query: the last
/// entry picks one of the equal-mass centers, the rest is a Gaussian offset
/// radially clipped to the cluster radius.
pub fn query_from_gaussian(centers: &[Vec<f64>], radius: f64, g: &[f64]) -> (usize, Vec<f64>) {
    let dim = centers[0].len();
    debug_assert_eq!(g.len(), dim + 1);
    let n = centers.len();
    let j = ((n as f64 * std_normal_cdf(g[dim])) as usize).min(n - 1);
    let scale = 1.0 / (dim as f64).sqrt();
    let norm = g[..dim].iter().map(|v| v * v).sum::<f64>().sqrt() * scale;
    // the margin keeps rounding from pushing a query past the radius
    let clip = radius * scale / (norm * (1.0 + 1e-12)).max(1.0);
    let q = centers[j].iter().zip(&g[..dim]).map(|(c, v)| c + clip * v).collect();
    (j, q)
}

/// `count` centers at norm `center_norm` in random directions.
pub fn draw_centers(count: usize, dim: usize, center_norm: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..count as u64)
        .map(|j| {
            let g = gaussian_noise(Seed(keyed_mix(j, seed)), dim).into_values();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            g.into_iter().map(|v| v * center_norm / norm).collect()
        })
        .collect()
}

/// Uniformly random direction in parameter space with Frobenius norm `w`.
pub fn draw_probe(vocab: usize, dim: usize, w: f64, seed: u64) -> Params {
    let g = gaussian_noise(Seed(seed), vocab * dim).into_values();
    let mut theta = Matrix::from_vec(vocab, dim, g).expect("probe shape");
    let norm = theta.frobenius();
    theta.scale(w / norm);
    theta
}

impl World {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let master = cfg.seed;
        let teacher_seed = derive_seed(master, TAG_TEACHER);
        let teacher = match cfg.teacher {
            TeacherKind::Token => TaskTeacher::Token(SoftmaxTokenTeacher::random(
                cfg.vocab,
                cfg.q_dim,
                cfg.w_bound,
                cfg.r_x,
                cfg.teacher_norm_fraction,
                teacher_seed,
            )?),
            TeacherKind::Linear => TaskTeacher::Linear(LinearGaussianTeacher::random(
                cfg.linear_out_dim,
                cfg.q_dim,
                cfg.linear_sigma,
                teacher_seed,
            )?),
        };
        let centers = draw_centers(cfg.centers, cfg.q_dim, cfg.center_norm, derive_seed(master, TAG_CENTERS));
        let bucket_model = match cfg.bucket_mode {
            BucketMode::NearestCenter => BucketModel::nearest_center(centers.clone(), cfg.radius)?,
            BucketMode::Lsh => BucketModel::lsh(
                cfg.q_dim,
                cfg.lsh_bits,
                derive_seed(master, TAG_LSH),
                centers.clone(),
                cfg.radius,
            )?,
        };

        let (holdout, probes) = match &teacher {
            TaskTeacher::Token(t) => {
                let key = derive_seed(master, TAG_HOLDOUT);
                let queries: Vec<Vec<f64>> = (0..cfg.n_holdout as u64)
                    .map(|i| {
                        let g = gaussian_noise(Seed(keyed_mix(i, key)), cfg.q_dim + 1);
                        query_from_gaussian(&centers, cfg.radius, g.values()).1
                    })
                    .collect();
                let holdout = Holdout::new(t, &queries);
                let probe_key = derive_seed(master, TAG_PROBES);
                let probes = (0..cfg.n_probes as u64)
                    .map(|p| {
                        let theta = draw_probe(cfg.vocab, cfg.q_dim, cfg.w_bound, keyed_mix(p, probe_key));
                        let population = holdout.population_loss(&theta);
                        Probe { theta, population }
                    })
                    .collect();
                (Some(holdout), probes)
            }
            TaskTeacher::Linear(_) => (None, Vec::new()),
        };
        Ok(Self {
            teacher,
            centers,
            bucket_model,
            holdout,
            probes,
        })
    }

    pub fn token_teacher(&self) -> Result<&SoftmaxTokenTeacher> {
        match &self.teacher {
            TaskTeacher::Token(t) => Ok(t),
            TaskTeacher::Linear(_) => Err(LadsError::ConfigInvalid("student training needs the token teacher".into())),
        }
    }

    /// Draws `n` i.i.d. task queries from an explicit RNG (used by tests and
    /// the alignment check).
    pub fn sample_queries<R: Rng>(&self, rng: &mut R, n: usize, radius: f64) -> Vec<(usize, Vec<f64>)> {
        let dim = self.centers[0].len();
        (0..n)
            .map(|_| {
                let g = gaussian_noise(Seed(rng.gen()), dim + 1);
                query_from_gaussian(&self.centers, radius, g.values())
            })
            .collect()
    }
}

/// Deterministic RNG for a labelled purpose.
pub fn rng_for(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucketing::squared_distance;

    #[test]
    fn queries_stay_within_radius() {
        let centers = draw_centers(3, 4, 2.0, 9);
        for i in 0..2000u64 {
            let g = gaussian_noise(Seed(i), 5);
            let (j, q) = query_from_gaussian(&centers, 0.7, g.values());
            assert!(squared_distance(&q, &centers[j]).sqrt() <= 0.7);
        }
        let (_, q) = query_from_gaussian(&centers, 0.0, gaussian_noise(Seed(1), 5).values());
        assert!(centers.contains(&q));
    }

    #[test]
    fn center_selector_is_balanced() {
        let centers = draw_centers(4, 2, 1.0, 3);
        let mut counts = [0u64; 4];
        for i in 0..40_000u64 {
            counts[query_from_gaussian(&centers, 0.1, gaussian_noise(Seed(i), 3).values()).0] += 1;
        }
        let r = crate::stats::chi_square_categorical(&counts, &[0.25; 4]).unwrap();
        assert!(r.passed, "{counts:?}");
    }

    #[test]
    fn world_ignores_regime_and_grid() {
        let small = ExperimentConfig {
            n_holdout: 10_000,
            n_probes: 2,
            ..Default::default()
        };
        let a = World::new(&small).unwrap();
        let b = World::new(&ExperimentConfig {
            accounts: 1,
            queries: 3,
            regime: super::super::Regime::Iid,
            ..small.clone()
        })
        .unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.probes[1].theta, b.probes[1].theta);
        assert_eq!(a.probes[1].population, b.probes[1].population);
        assert!((a.probes[0].theta.frobenius() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn holdout_loss_of_teacher_is_its_entropy() {
        let cfg = ExperimentConfig {
            n_holdout: 10_000,
            n_probes: 0,
            ..Default::default()
        };
        let w = World::new(&cfg).unwrap();
        let h = w.holdout.as_ref().unwrap();
        let t = w.token_teacher().unwrap();
        let ent: f64 = (0..h.len())
            .map(|i| -h.probs(i).iter().map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / h.len() as f64;
        let pop = h.population_loss(t.theta());
        assert!((pop.mean - ent).abs() < 1e-12);
        assert!((h.bayes_loss() - ent).abs() < 1e-12);
        assert!(h.bayes_accuracy() >= h.accuracy(&Params::zeros(8, 8)));
    }
}
