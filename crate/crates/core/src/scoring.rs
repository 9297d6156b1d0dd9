//! Preference scoring: a structural loss on depth-proxy maps, a semantic loss
//! on masked embeddings plus out-of-mask reconstruction, per-batch advantage
//! normalization, and pair ranking. Both losses are lower-is-better.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Weight of the semantic advantage in the total.
    pub alpha: f64,
    /// Weight of the out-of-mask reconstruction term.
    pub lambda: f64,
    pub eps_adv: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.5,
            eps_adv: 1e-8,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.lambda >= 0.0 && self.eps_adv > 0.0)
            || !(self.alpha.is_finite() && self.lambda.is_finite() && self.eps_adv.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "score config needs alpha >= 0, lambda >= 0, eps_adv > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Raw losses of one generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLosses {
    pub structural: f64,
    pub semantic: f64,
}

impl RawLosses {
    /// `structural + alpha·semantic`, the unnormalized combination used for evaluation.
    pub fn combined(&self, alpha: f64) -> f64 {
        self.structural + alpha * self.semantic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub struct_loss: f64,
    pub sem_loss: f64,
    pub adv_struct: f64,
    pub adv_sem: f64,
    pub total: f64,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] if *c >= 1 => Ok((*c, *h, *w)),
        other => Err(NumericsError::Rank {
            op: "image",
            expected: 3,
            shape: other.to_vec(),
        }
        .into()),
    }
}

/// Gradient magnitude of the channel mean, `[1, H, W]`. Forward differences;
/// the last column has no horizontal and the last row no vertical term.
pub fn depth_proxy(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let d = image.data();
    let mean: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64)
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = mean[y * w + x];
            let dx = if x + 1 < w { mean[y * w + x + 1] - v } else { 0.0 };
            let dy = if y + 1 < h { mean[(y + 1) * w + x] - v } else { 0.0 };
            out[y * w + x] = (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(Tensor::new(vec![1, h, w], out)?)
}

/// Mean absolute difference of the two depth-proxy maps.
pub fn structural_score(input: &Tensor, generated: &Tensor) -> Result<f64> {
    input.expect_same_shape(generated, "structural_score")?;
    let (a, b) = (depth_proxy(input)?, depth_proxy(generated)?);
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn check_mask(image: &Tensor, mask: &Tensor, op: &'static str) -> Result<()> {
    let (_, h, w) = image_dims(image)?;
    if mask.shape() != [1, h, w] {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: vec![1, h, w],
            right: mask.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Per-channel mean then per-channel population standard deviation over the
/// pixels where `mask` is 1. An empty mask gives the zero vector.
pub fn semantic_embed(image: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    check_mask(image, mask, "semantic_embed")?;
    let (c, h, w) = image_dims(image)?;
    let idx: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.5)
        .map(|(i, _)| i)
        .collect();
    let mut out = vec![0.0; 2 * c];
    if idx.is_empty() {
        return Ok(out);
    }
    let n = idx.len() as f64;
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let mean = idx.iter().map(|&i| plane[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (plane[i] - mean).powi(2)).sum::<f64>() / n;
        out[ch] = mean;
        out[c + ch] = var.sqrt();
    }
    Ok(out)
}

/// `1 − cos(a, b)`; two zero vectors are at distance 0, one zero vector at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_distance",
            left: vec![a.len()],
            right: vec![b.len()],
        }
        .into());
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
        }
    })
}

/// Embedding distance between the generated region and the style region,
/// plus `lambda` times the out-of-mask squared deviation from the input
/// (averaged over every pixel and channel).
pub fn semantic_score(
    generated: &Tensor,
    input: &Tensor,
    style: &Tensor,
    input_mask: &Tensor,
    style_mask: &Tensor,
    lambda: f64,
) -> Result<f64> {
    generated.expect_same_shape(input, "semantic_score")?;
    check_mask(input, input_mask, "semantic_score")?;
    let embed = cosine_distance(&semantic_embed(generated, input_mask)?, &semantic_embed(style, style_mask)?)?;
    Ok(embed + lambda * outside_mask_mse(input, generated, input_mask)?)
}

/// Mean over all pixels and channels of `(1 − m)·(a − b)²`.
pub fn outside_mask_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "outside_mask_mse")?;
    check_mask(a, mask, "outside_mask_mse")?;
    let hw = mask.len();
    let m = mask.data();
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (x, y))| (1.0 - m[i % hw]) * (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// A source of the two raw losses for a generated sample.
pub trait Scorer: Sync {
    fn losses(&self, sample: &ScoringInput<'_>) -> Result<RawLosses>;
}

/// Everything needed to score one generated image.
#[derive(Clone, Copy, Debug)]
pub struct ScoringInput<'a> {
    pub generated: &'a Tensor,
    pub input: &'a Tensor,
    pub input_mask: &'a Tensor,
    pub style: &'a Tensor,
    pub style_mask: &'a Tensor,
}

/// Depth-proxy structural loss and masked-statistics semantic loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyScorer {
    pub lambda: f64,
}

impl Scorer for ProxyScorer {
    fn losses(&self, s: &ScoringInput<'_>) -> Result<RawLosses> {
        Ok(RawLosses {
            structural: structural_score(s.input, s.generated)?,
            semantic: semantic_score(s.generated, s.input, s.style, s.input_mask, s.style_mask, self.lambda)?,
        })
    }
}

/// `(L − mean)/sqrt(var + eps)` with the population variance of the batch.
pub fn batch_advantages(losses: &[f64], eps: f64) -> Result<Vec<f64>> {
    if losses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage normalization needs a batch of at least 2, got {}",
            losses.len()
        )));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    if denom == 0.0 {
        return Ok(vec![0.0; losses.len()]);
    }
    Ok(losses.iter().map(|l| (l - mean) / denom).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Index (0 or 1) of the preferred sample in each pair.
    pub winners: Vec<usize>,
    pub reports: Vec<[ScoreReport; 2]>,
}

/// Normalizes each loss over all samples of all pairs jointly and picks the
/// lower total within each pair. Ties go to the lower raw structural loss,
/// then to index 0.
pub fn combine_and_rank(pairs: &[[RawLosses; 2]], config: &ScoreConfig) -> Result<Ranking> {
    config.validate()?;
    let flat: Vec<RawLosses> = pairs.iter().flatten().copied().collect();
    let adv_s = batch_advantages(&flat.iter().map(|l| l.structural).collect::<Vec<_>>(), config.eps_adv)?;
    let adv_m = batch_advantages(&flat.iter().map(|l| l.semantic).collect::<Vec<_>>(), config.eps_adv)?;
    let report = |i: usize| ScoreReport {
        struct_loss: flat[i].structural,
        sem_loss: flat[i].semantic,
        adv_struct: adv_s[i],
        adv_sem: adv_m[i],
        total: adv_s[i] + config.alpha * adv_m[i],
    };
    let mut winners = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    for k in 0..pairs.len() {
        let r = [report(2 * k), report(2 * k + 1)];
        let second_wins = r[1].total < r[0].total || (r[1].total == r[0].total && r[1].struct_loss < r[0].struct_loss);
        winners.push(usize::from(second_wins));
        reports.push(r);
    }
    Ok(Ranking { winners, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{build_style_bank, make_dataset, Concept, ImageSize};
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], v).unwrap()
    }

    #[test]
    fn depth_proxy_examples() {
        let flat = Tensor::full(&[3, 4, 4], 0.3);
        assert!(depth_proxy(&flat).unwrap().data().iter().all(|&v| v == 0.0));
        let ramp = img(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(depth_proxy(&ramp).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn structural_examples() {
        let ramp = img(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(structural_score(&ramp, &ramp).unwrap(), 0.0);
        let flat = Tensor::full(&[1, 2, 2], 0.7);
        assert_eq!(structural_score(&flat, &ramp).unwrap(), 0.5);
        assert_eq!(structural_score(&ramp, &flat).unwrap(), 0.5);
        assert!(structural_score(&flat, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    proptest! {
        #[test]
        fn depth_proxy_nonnegative_and_structural_symmetric(
            a in prop::collection::vec(-2.0f64..2.0, 48),
            b in prop::collection::vec(-2.0f64..2.0, 48),
        ) {
            let (a, b) = (img(3, 4, 4, a), img(3, 4, 4, b));
            prop_assert!(depth_proxy(&a).unwrap().data().iter().all(|&v| v >= 0.0));
            prop_assert_eq!(structural_score(&a, &b).unwrap(), structural_score(&b, &a).unwrap());
        }
    }

    #[test]
    fn embed_examples() {
        let mask = Tensor::full(&[1, 2, 2], 1.0);
        let e = semantic_embed(&Tensor::full(&[3, 2, 2], 0.5), &mask).unwrap();
        assert_eq!(e, vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
        let checker = img(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(semantic_embed(&checker, &mask).unwrap(), vec![0.5, 0.5]);
        let empty = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(semantic_embed(&checker, &empty).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[0.3, 2.0], &[0.3, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[0.3, 2.0], &[-0.3, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((d - 0.292893).abs() < 1e-6);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn semantic_decomposition() {
        let size = ImageSize::new(6, 6);
        let ex = &make_dataset(1, 3, size).unwrap()[0];
        let (input, m_in) = (&ex.scene.image, &ex.scene.region_mask);
        let (style, m_sty) = (&ex.style.image, &ex.style.mask);
        let mut r = rng::seeded(1);
        let gen = rng::standard_normal(input.shape(), &mut r);
        let full = semantic_score(&gen, input, style, m_in, m_sty, 0.5).unwrap();
        let embed_only = cosine_distance(&semantic_embed(&gen, m_in).unwrap(), &semantic_embed(style, m_sty).unwrap()).unwrap();
        assert_eq!(semantic_score(&gen, input, style, m_in, m_sty, 0.0).unwrap(), embed_only);
        assert!(full > embed_only);
        let ones = Tensor::full(m_in.shape(), 1.0);
        let a = semantic_score(&gen, input, style, &ones, m_sty, 0.5).unwrap();
        let b = semantic_score(&gen, input, style, &ones, m_sty, 0.0).unwrap();
        assert_eq!(a, b);

        // lambda = 0 ignores out-of-mask content
        let mut other = gen.clone();
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            if m_in.data()[i % m_in.len()] == 0.0 {
                *v += 1.0;
            }
        }
        assert_eq!(
            semantic_score(&gen, input, style, m_in, m_sty, 0.0).unwrap(),
            semantic_score(&other, input, style, m_in, m_sty, 0.0).unwrap()
        );
        assert_eq!(ScoreConfig::default().lambda, 0.5);
    }

    #[test]
    fn matched_statistics_score_zero() {
        let mut style = Tensor::zeros(&[3, 4, 4]);
        let mut r = rng::seeded(2);
        for v in style.data_mut() {
            *v = rand::Rng::random_range(&mut r, -1.0..1.0);
        }
        let input = Tensor::full(&[3, 4, 4], 0.1);
        let mask = Tensor::full(&[1, 4, 4], 1.0);
        let s = semantic_score(&style, &input, &style, &mask, &mask, 0.5).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn oracle_targets_beat_unedited_inputs() {
        let size = ImageSize::default();
        for ex in make_dataset(40, 17, size).unwrap() {
            let (input, m) = (&ex.scene.image, &ex.scene.region_mask);
            let score = |gen: &Tensor| semantic_score(gen, input, &ex.style.image, m, &ex.style.mask, 0.5).unwrap();
            assert!(score(&ex.target) <= score(input), "{:?}", ex.concept);
        }
    }

    #[test]
    fn snow_banks_are_separable() {
        let size = ImageSize::default();
        let (mut cross, mut within) = (0.0, 0.0);
        for seed in 0..5 {
            let embed = |c: Concept| -> Vec<Vec<f64>> {
                build_style_bank(c, seed, size)
                    .unwrap()
                    .exemplars
                    .iter()
                    .map(|e| semantic_embed(&e.image, &e.mask).unwrap())
                    .collect()
            };
            let (sparse, dense) = (embed(Concept::SparseSnow), embed(Concept::DenseSnow));
            for a in &dense {
                for b in &sparse {
                    cross += cosine_distance(a, b).unwrap();
                }
                for b in &dense {
                    within += cosine_distance(a, b).unwrap();
                }
            }
        }
        assert!(cross > within, "cross {cross} within {within}");
    }

    #[test]
    fn advantage_examples() {
        let a = batch_advantages(&[1.0, 2.0, 3.0], 0.0).unwrap();
        for (x, y) in a.iter().zip([-1.224745, 0.0, 1.224745]) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(batch_advantages(&[4.0, 4.0, 4.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(batch_advantages(&[1.0], 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn advantages_standardize(xs in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let eps = 1e-8;
            let a = batch_advantages(&xs, eps).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-3 {
                prop_assert!(var <= 1.0 + 1e-12 && var >= 1.0 - 10.0 * eps, "{}", var);
            }
        }

        #[test]
        fn ranking_invariant_to_component_rescale(
            raw in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0), 4..16),
            c in 0.01f64..100.0,
            which in 0usize..2,
        ) {
            let n = raw.len() / 2 * 2;
            let pairs: Vec<[RawLosses; 2]> = raw[..n]
                .chunks(2)
                .map(|p| [0, 1].map(|i| RawLosses { structural: p[i].0, semantic: p[i].1 }))
                .collect();
            let scaled: Vec<[RawLosses; 2]> = pairs
                .iter()
                .map(|p| p.map(|l| if which == 0 {
                    RawLosses { structural: l.structural * c, ..l }
                } else {
                    RawLosses { semantic: l.semantic * c, ..l }
                }))
                .collect();
            // eps is negligible against these spreads but not exactly scale-free
            let cfg = ScoreConfig { eps_adv: 1e-300, ..Default::default() };
            let a = combine_and_rank(&pairs, &cfg).unwrap();
            let b = combine_and_rank(&scaled, &cfg).unwrap();
            for (k, (x, y)) in a.winners.iter().zip(&b.winners).enumerate() {
                let r = a.reports[k];
                // skip pairs whose totals agree to rounding
                if (r[0].total - r[1].total).abs() > 1e-9 {
                    prop_assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn tie_rules() {
        let l = RawLosses { structural: 0.4, semantic: 0.2 };
        let other = RawLosses { structural: 0.9, semantic: 0.1 };
        let r = combine_and_rank(&[[l, l], [other, l]], &ScoreConfig::default()).unwrap();
        assert_eq!(r.winners[0], 0);
        for rep in r.reports.iter().flatten() {
            assert_eq!(rep.total, rep.adv_struct + rep.adv_sem);
        }
    }

    #[test]
    fn alpha_zero_follows_structural_order() {
        let pairs = [
            [RawLosses { structural: 0.3, semantic: 0.0 }, RawLosses { structural: 0.1, semantic: 5.0 }],
            [RawLosses { structural: 0.2, semantic: 5.0 }, RawLosses { structural: 0.6, semantic: 0.0 }],
        ];
        let cfg = ScoreConfig { alpha: 0.0, ..Default::default() };
        assert_eq!(combine_and_rank(&pairs, &cfg).unwrap().winners, vec![1, 0]);
    }

    #[test]
    fn swapping_a_pair_flips_the_winner() {
        let a = RawLosses { structural: 0.3, semantic: 0.4 };
        let b = RawLosses { structural: 0.5, semantic: 0.1 };
        let cfg = ScoreConfig::default();
        let x = combine_and_rank(&[[a, b], [b, b]], &cfg).unwrap();
        let y = combine_and_rank(&[[b, a], [b, b]], &cfg).unwrap();
        assert_eq!(x.winners[0], 1 - y.winners[0]);
    }
}
