//! Redundancy-reduction objectives: the cross-correlation of two embedding
//! batches, the two-view Barlow Twins loss, and the Barlow Tuple loss that
//! averages the two-view loss over every unique pair of `n` domain views.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default off-diagonal weight.
pub const DEFAULT_LAMBDA: f64 = 5e-3;
/// Default standard-deviation regularizer of the per-feature standardization.
pub const DEFAULT_EPSILON: f64 = 1e-9;

/// `B×D` projector outputs for one domain. Row `b` of every domain's batch
/// must come from the same physical location.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    values: Tensor,
    domain_id: usize,
}

impl EmbeddingBatch {
    pub fn new(values: Tensor, domain_id: usize) -> Result<Self> {
        let (b, _) = values.dims2()?;
        if b < 2 {
            return Err(Error::BatchSize { required: 2, actual: b });
        }
        if !values.is_finite() {
            return Err(Error::Numeric("embedding batch holds non-finite values".into()));
        }
        Ok(Self { values, domain_id })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `D×D` matrix of Pearson correlations between the features of two views.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrelation {
    matrix: Tensor,
}

impl CrossCorrelation {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleLossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Embedding dimension.
    pub d: usize,
}

impl TupleLossConfig {
    pub fn new(d: usize) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.d == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// All `(i, j)` with `i < j < n` in lexicographic order; `n·(n−1)/2` pairs.
pub fn unique_pairs(n: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Contract(format!("need at least two views, got {n}")));
    }
    Ok((0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect())
}

/// Number of unique pairs, `n! / ((n−2)!·2!)`.
pub fn pair_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        n * (n - 1) / 2
    }
}

/// Records `C = (1/B)·Ẑaᵀ·Ẑb` on the tape, where `Ẑ` are the per-feature
/// standardized batches.
pub fn cross_correlation_on(tape: &mut Tape, za: Var, zb: Var, epsilon: f64) -> Result<Var> {
    let (ba, da) = tape.value(za).dims2()?;
    let (bb, db) = tape.value(zb).dims2()?;
    if (ba, da) != (bb, db) {
        return Err(Error::dim(format!(
            "embedding batches differ in shape: {ba}×{da} vs {bb}×{db}"
        )));
    }
    let na = tape.batchnorm_feature(za, epsilon)?;
    let nb = tape.batchnorm_feature(zb, epsilon)?;
    let nat = tape.transpose(na)?;
    let c = tape.matmul(nat, nb)?;
    tape.scale(c, 1.0 / ba as f64)
}

/// Records the Barlow Tuple loss over `views` on the tape.
pub fn barlow_tuple_loss_on(tape: &mut Tape, views: &[Var], config: &TupleLossConfig) -> Result<Var> {
    config.validate()?;
    let pairs = unique_pairs(views.len())?;
    let shape = tape.value(views[0]).shape().to_vec();
    for v in views {
        let s = tape.value(*v).shape();
        if s != shape.as_slice() {
            return Err(Error::dim(format!("heterogeneous view shapes {shape:?} and {s:?}")));
        }
    }
    if shape.len() != 2 || shape[1] != config.d {
        return Err(Error::dim(format!(
            "views have shape {shape:?}, config expects dimension {}",
            config.d
        )));
    }
    let mut total: Option<Var> = None;
    for (i, j) in &pairs {
        let c = cross_correlation_on(tape, views[*i], views[*j], config.epsilon)?;
        let l = tape.barlow_twins(c, config.lambda)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("at least one pair");
    if pairs.len() == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / pairs.len() as f64)
    }
}

pub fn cross_correlation(za: &EmbeddingBatch, zb: &EmbeddingBatch, epsilon: f64) -> Result<CrossCorrelation> {
    let mut tape = Tape::new();
    let a = tape.input(za.values.clone())?;
    let b = tape.input(zb.values.clone())?;
    let c = cross_correlation_on(&mut tape, a, b, epsilon)?;
    CrossCorrelation::new(tape.value(c).clone())
}

pub fn barlow_twins_loss(c: &CrossCorrelation, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.input(c.matrix.clone())?;
    let l = tape.barlow_twins(v, lambda)?;
    tape.value(l).item()
}

pub fn barlow_tuple_loss(embeddings: &[EmbeddingBatch], config: &TupleLossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let views = embeddings
        .iter()
        .map(|e| tape.input(e.values.clone()))
        .collect::<Result<Vec<_>>>()?;
    if views.is_empty() {
        return Err(Error::Contract("need at least two views, got 0".into()));
    }
    let l = barlow_tuple_loss_on(&mut tape, &views, config)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, ParamStore};

    fn batch(rows: usize, cols: usize, data: &[f64]) -> EmbeddingBatch {
        EmbeddingBatch::new(Tensor::new([rows, cols], data.to_vec()).unwrap(), 0).unwrap()
    }

    fn random_batch(b: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingBatch {
        EmbeddingBatch::new(Tensor::from_fn([b, d], |_| rng.random_range(-2.0..2.0)), 0).unwrap()
    }

    /// Pearson correlation straight from its definition.
    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn column(e: &EmbeddingBatch, j: usize) -> Vec<f64> {
        (0..e.batch_size())
            .map(|i| e.values().data()[i * e.dim() + j])
            .collect()
    }

    /// Two-view loss straight from its definition.
    fn twins_oracle(a: &EmbeddingBatch, b: &EmbeddingBatch, lambda: f64) -> f64 {
        let d = a.dim();
        let mut l = 0.0;
        for i in 0..d {
            for j in 0..d {
                let c = pearson(&column(a, i), &column(b, j));
                l += if i == j { (1.0 - c).powi(2) } else { lambda * c * c };
            }
        }
        l
    }

    #[test]
    fn cross_correlation_examples() {
        let a = batch(2, 1, &[1.0, -1.0]);
        let c = cross_correlation(&a, &a, DEFAULT_EPSILON).unwrap();
        assert!((c.matrix().data()[0] - 1.0).abs() < 1e-12);

        let neg = batch(2, 1, &[-1.0, 1.0]);
        let c = cross_correlation(&a, &neg, DEFAULT_EPSILON).unwrap();
        assert!((c.matrix().data()[0] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let za = random_batch(8, 3, &mut rng);
        let zb = random_batch(8, 3, &mut rng);
        let c = cross_correlation(&za, &zb, DEFAULT_EPSILON).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let oracle = pearson(&column(&za, i), &column(&zb, j));
                assert!((c.matrix().data()[i * 3 + j] - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cross_correlation_errors() {
        assert!(matches!(
            EmbeddingBatch::new(Tensor::zeros([1, 3]), 0),
            Err(Error::BatchSize { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_batch(4, 3, &mut rng);
        let b = random_batch(4, 2, &mut rng);
        assert!(matches!(
            cross_correlation(&a, &b, DEFAULT_EPSILON),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn barlow_twins_examples() {
        let id = CrossCorrelation::new(Tensor::eye(4)).unwrap();
        assert_eq!(barlow_twins_loss(&id, DEFAULT_LAMBDA).unwrap(), 0.0);
        let neg = CrossCorrelation::new(Tensor::new([1, 1], vec![-1.0]).unwrap()).unwrap();
        assert_eq!(barlow_twins_loss(&neg, DEFAULT_LAMBDA).unwrap(), 4.0);
        let c = CrossCorrelation::new(Tensor::new([2, 2], vec![1.0, 0.5, 0.5, 1.0]).unwrap()).unwrap();
        assert!((barlow_twins_loss(&c, 5e-3).unwrap() - 2.5e-3).abs() < 1e-15);
        let rect = CrossCorrelation::new(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(barlow_twins_loss(&rect, 5e-3), Err(Error::Dimension(_))));
    }

    #[test]
    fn unique_pair_examples() {
        assert_eq!(unique_pairs(3).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(unique_pairs(2).unwrap(), vec![(0, 1)]);
        assert_eq!(unique_pairs(5).unwrap().len(), 10);
        assert!(matches!(unique_pairs(1), Err(Error::Contract(_))));
        assert!(matches!(unique_pairs(0), Err(Error::Contract(_))));
    }

    #[test]
    fn tuple_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TupleLossConfig::new(4);
        let a = random_batch(16, 4, &mut rng);
        let b = random_batch(16, 4, &mut rng);
        let c = random_batch(16, 4, &mut rng);

        let pair = barlow_twins_loss(&cross_correlation(&a, &b, cfg.epsilon).unwrap(), cfg.lambda).unwrap();
        assert_eq!(barlow_tuple_loss(&[a.clone(), b.clone()], &cfg).unwrap(), pair);

        let same = barlow_tuple_loss(&[a.clone(), a.clone(), a.clone()], &cfg).unwrap();
        let self_pair = barlow_tuple_loss(&[a.clone(), a.clone()], &cfg).unwrap();
        assert!((same - self_pair).abs() < 1e-12);

        let oracle =
            (twins_oracle(&a, &b, cfg.lambda) + twins_oracle(&a, &c, cfg.lambda) + twins_oracle(&b, &c, cfg.lambda))
                / 3.0;
        let got = barlow_tuple_loss(&[a, b, c], &cfg).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn tuple_loss_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TupleLossConfig::new(3);
        let a = random_batch(8, 3, &mut rng);
        let b = random_batch(6, 3, &mut rng);
        assert!(matches!(
            barlow_tuple_loss(&[a.clone(), b], &cfg),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(barlow_tuple_loss(&[a.clone()], &cfg), Err(Error::Contract(_))));
        let bad = TupleLossConfig { lambda: 0.0, ..cfg };
        assert!(matches!(
            barlow_tuple_loss(&[a.clone(), a], &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_is_zero_iff_every_correlation_is_identity() {
        // Identical standardized orthogonal columns give C = I exactly.
        let a = batch(4, 2, &[1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        let cfg = TupleLossConfig::new(2);
        assert!(barlow_tuple_loss(&[a.clone(), a.clone(), a.clone()], &cfg).unwrap() < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(4, 2, &mut rng);
        assert!(barlow_tuple_loss(&[a.clone(), a, b], &cfg).unwrap() > 1e-3);
    }

    #[test]
    fn gradient_wrt_raw_embeddings_matches_finite_differences() {
        for n in [2usize, 3, 4] {
            for d in [2usize, 8] {
                let mut rng = ChaCha8Rng::seed_from_u64((n * 100 + d) as u64);
                let mut store = ParamStore::new();
                let ids: Vec<_> = (0..n)
                    .map(|k| {
                        store
                            .add(
                                format!("z{k}"),
                                Tensor::from_fn([16, d], |_| rng.random_range(-1.0..1.0)),
                            )
                            .unwrap()
                    })
                    .collect();
                let cfg = TupleLossConfig::new(d);
                let report = grad_check(&mut store, &ids, 1e-5, |tape, s| {
                    let views = ids.iter().map(|&id| tape.param(s, id)).collect::<Result<Vec<_>>>()?;
                    barlow_tuple_loss_on(tape, &views, &cfg)
                })
                .unwrap();
                assert!(report.max_rel_err <= 1e-4, "n={n} d={d}: {report:?}");
                assert_eq!(report.skipped_kinks, 0);
            }
        }
    }

    fn arb_views() -> impl Strategy<Value = (Vec<EmbeddingBatch>, Vec<usize>)> {
        (2usize..5, 1usize..5, 3usize..9).prop_flat_map(|(n, d, b)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, b * d), n),
                Just(Vec::<usize>::new()).prop_perturb(move |_, mut rng| {
                    let mut p: Vec<usize> = (0..b).collect();
                    for i in (1..b).rev() {
                        p.swap(i, rng.random_range(0..=i));
                    }
                    p
                }),
            )
                .prop_map(move |(vals, perm)| {
                    let views = vals
                        .into_iter()
                        .map(|v| EmbeddingBatch::new(Tensor::new([b, d], v).unwrap(), 0).unwrap())
                        .collect();
                    (views, perm)
                })
        })
    }

    proptest! {
        #[test]
        fn tuple_loss_ignores_view_order((views, _) in arb_views()) {
            let cfg = TupleLossConfig::new(views[0].dim());
            let forward = barlow_tuple_loss(&views, &cfg).unwrap();
            let mut rev = views.clone();
            rev.reverse();
            let backward = barlow_tuple_loss(&rev, &cfg).unwrap();
            prop_assert!((forward - backward).abs() <= 1e-9 * forward.abs().max(1.0));
        }

        #[test]
        fn tuple_loss_ignores_shared_row_permutation((views, perm) in arb_views()) {
            let cfg = TupleLossConfig::new(views[0].dim());
            let base = barlow_tuple_loss(&views, &cfg).unwrap();
            let permuted: Vec<EmbeddingBatch> = views
                .iter()
                .map(|v| {
                    let d = v.dim();
                    let data = perm.iter().flat_map(|&r| v.values().row(r).to_vec()).collect();
                    EmbeddingBatch::new(Tensor::new([perm.len(), d], data).unwrap(), 0).unwrap()
                })
                .collect();
            let moved = barlow_tuple_loss(&permuted, &cfg).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn correlation_is_bounded_and_affine_invariant(
            (views, _) in arb_views(),
            gains in prop::collection::vec(0.1f64..10.0, 4),
            biases in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let (a, b) = (&views[0], &views[1]);
            let c = cross_correlation(a, b, DEFAULT_EPSILON).unwrap();
            for v in c.matrix().data() {
                prop_assert!(v.abs() <= 1.0 + 1e-9);
            }
            let d = a.dim();
            let affine = |e: &EmbeddingBatch| {
                let data = e.values().data().iter().enumerate()
                    .map(|(i, v)| v * gains[i % d] + biases[i % d]).collect();
                EmbeddingBatch::new(Tensor::new(e.values().shape().to_vec(), data).unwrap(), 0).unwrap()
            };
            let c2 = cross_correlation(&affine(a), &affine(b), DEFAULT_EPSILON).unwrap();
            prop_assert!(c.matrix().max_abs_diff(c2.matrix()) < 1e-9);
        }
    }
}
