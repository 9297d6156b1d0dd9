//! Synthetic editing tasks: structured scenes with an editable region,
//! concept style banks of five exemplars each, and ground-truth edits.
//!
//! Images are `[C, H, W]` tensors with values in `[-1, 1]`; masks are
//! `[1, H, W]` tensors with entries in `{0, 1}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng::{self, tags, Rng};

pub const EXEMPLARS_PER_BANK: usize = 5;

/// Color of the editable region. No other scene content goes this dark.
pub const REGION_COLOR: [f64; 3] = [-0.62, -0.6, -0.55];
/// Channel-mean threshold above which a pixel counts as a snow speckle.
pub const SPECKLE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown concept `{0}` (expected sparse-snow, dense-snow, gold or wood)")]
    UnknownConcept(String),
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("image size {0:?} unsupported: need 3 channels and at least 4x4 pixels")]
    BadSize(ImageSize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
        }
    }
}

impl ImageSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn mask_shape(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.channels != 3 || self.height < 4 || self.width < 4 {
            return Err(SynthError::BadSize(*self));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Concept {
    SparseSnow,
    DenseSnow,
    Gold,
    Wood,
}

impl Concept {
    pub const ALL: [Concept; 4] = [Concept::SparseSnow, Concept::DenseSnow, Concept::Gold, Concept::Wood];

    pub fn name(self) -> &'static str {
        match self {
            Concept::SparseSnow => "sparse-snow",
            Concept::DenseSnow => "dense-snow",
            Concept::Gold => "gold",
            Concept::Wood => "wood",
        }
    }

    /// Both snow concepts share one instruction; only the visual prompt
    /// tells them apart.
    pub fn instruction(self) -> Instruction {
        match self {
            Concept::SparseSnow | Concept::DenseSnow => Instruction::SNOW,
            Concept::Gold => Instruction::GOLD,
            Concept::Wood => Instruction::WOOD,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Concept::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SynthError::UnknownConcept(s.to_string()))
    }
}

/// Instruction id from the fixed registry. Id 0 is the null instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instruction(pub usize);

impl Instruction {
    pub const NULL: Instruction = Instruction(0);
    pub const SNOW: Instruction = Instruction(1);
    pub const GOLD: Instruction = Instruction(2);
    pub const WOOD: Instruction = Instruction(3);

    pub const REGISTERED: [(Instruction, &'static str); 3] =
        [(Self::SNOW, "snow"), (Self::GOLD, "gold"), (Self::WOOD, "wood")];

    /// Looks up a registered (non-null) instruction by numeric id or name.
    pub fn parse(s: &str) -> Option<Instruction> {
        Self::REGISTERED
            .iter()
            .find(|(id, name)| *name == s || s.parse::<usize>().ok() == Some(id.0))
            .map(|(id, _)| *id)
    }
}

/// Per-exemplar parameters of a concept's texture process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Snow { density: f64, ground: [f64; 3] },
    Gold { hue: [f64; 3], noise: f64 },
    Wood { period: usize, phase: usize, horizontal: bool, light: [f64; 3], dark: [f64; 3] },
}

impl Texture {
    fn draw(concept: Concept, rng: &mut Rng) -> Self {
        fn jitter(rng: &mut Rng, base: [f64; 3], amp: f64) -> [f64; 3] {
            base.map(|b| b + rng.random_range(-amp..=amp))
        }
        match concept {
            Concept::SparseSnow | Concept::DenseSnow => {
                let ground = jitter(rng, [0.05, 0.1, 0.25], 0.05);
                let density = if concept == Concept::SparseSnow {
                    rng.random_range(0.08..0.18)
                } else {
                    rng.random_range(0.45..0.65)
                };
                Texture::Snow { density, ground }
            }
            Concept::Gold => Texture::Gold {
                hue: jitter(rng, [0.85, 0.55, -0.55], 0.08),
                noise: 0.06,
            },
            Concept::Wood => {
                let light = jitter(rng, [0.35, 0.0, -0.45], 0.05);
                let dark = jitter(rng, [0.05, -0.25, -0.65], 0.05);
                Texture::Wood {
                    period: rng.random_range(3..=5),
                    phase: rng.random_range(0..5),
                    horizontal: rng.random_bool(0.5),
                    light,
                    dark,
                }
            }
        }
    }

    /// Samples the texture color at pixel `(y, x)`.
    fn pixel(&self, y: usize, x: usize, rng: &mut Rng) -> [f64; 3] {
        let n = |rng: &mut Rng, s: f64| Normal::new(0.0, s).expect("positive std").sample(rng);
        let c = match self {
            Texture::Snow { density, ground } => {
                if rng.random::<f64>() < *density {
                    let v = 0.92 + n(rng, 0.03);
                    [v, v, v]
                } else {
                    ground.map(|g| g + n(rng, 0.04))
                }
            }
            Texture::Gold { hue, noise } => {
                let shade = n(rng, *noise);
                hue.map(|h| h + shade + n(rng, noise * 0.5))
            }
            Texture::Wood { period, phase, horizontal, light, dark } => {
                let coord = if *horizontal { y } else { x } + phase;
                let base = if (coord / period) % 2 == 0 { light } else { dark };
                base.map(|b| b + n(rng, 0.03))
            }
        };
        c.map(|v| v.clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub region_mask: Tensor,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleExemplar {
    pub image: Tensor,
    pub mask: Tensor,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    pub concept: Concept,
    pub exemplars: Vec<StyleExemplar>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditExample {
    pub scene: Scene,
    pub concept: Concept,
    pub instruction: Instruction,
    pub exemplar_index: usize,
    pub style: StyleExemplar,
    pub target: Tensor,
}

fn fill_rect(img: &mut Tensor, size: ImageSize, y0: usize, x0: usize, h: usize, w: usize, color: [f64; 3]) {
    let (hh, ww) = (size.height, size.width);
    let data = img.data_mut();
    for (c, &v) in color.iter().enumerate() {
        for y in y0..(y0 + h).min(hh) {
            for x in x0..(x0 + w).min(ww) {
                data[(c * hh + y) * ww + x] = v;
            }
        }
    }
}

/// Generates a scene deterministically from `seed`: a background with 2–5
/// constant-color rectangles, plus an editable region painted in
/// [`REGION_COLOR`]. Even seeds put the region in the bottom third of the
/// frame ("road"); odd seeds use a random rectangle.
pub fn generate_scene(seed: u64, size: ImageSize) -> Result<Scene, SynthError> {
    size.validate()?;
    let mut rng = rng::stream(seed, tags::SCENE);
    let (h, w) = (size.height, size.width);
    let mut image = Tensor::zeros(&size.shape());
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.35..0.35));
    fill_rect(&mut image, size, 0, 0, h, w, bg);
    for _ in 0..rng.random_range(2..=5) {
        let rh = rng.random_range(2..=h / 2);
        let rw = rng.random_range(2..=w / 2);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.4..0.5));
        fill_rect(&mut image, size, y0, x0, rh, rw, color);
    }

    let (y0, x0, rh, rw) = if seed % 2 == 0 {
        let band = h / 3;
        (h - band, 0, band, w)
    } else {
        let pixels = size.pixels() as f64;
        loop {
            let rh = rng.random_range(h.div_ceil(4)..=(3 * h).div_ceil(4));
            let rw = rng.random_range(w.div_ceil(4)..=(3 * w).div_ceil(4));
            let frac = (rh * rw) as f64 / pixels;
            if (0.10..=0.60).contains(&frac) {
                break (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw), rh, rw);
            }
        }
    };
    fill_rect(&mut image, size, y0, x0, rh, rw, REGION_COLOR);
    let mut mask = Tensor::zeros(&size.mask_shape());
    for y in y0..y0 + rh {
        mask.data_mut()[y * w + x0..y * w + x0 + rw].fill(1.0);
    }
    Ok(Scene {
        image,
        region_mask: mask,
        seed,
    })
}

fn texture_image(texture: &Texture, size: ImageSize, rng: &mut Rng) -> Tensor {
    let mut img = Tensor::zeros(&size.shape());
    let (h, w) = (size.height, size.width);
    for y in 0..h {
        for x in 0..w {
            let c = texture.pixel(y, x, rng);
            for (ch, v) in c.iter().enumerate() {
                img.data_mut()[(ch * h + y) * w + x] = *v;
            }
        }
    }
    img
}

/// Builds the five-exemplar bank for `concept`. Exemplars share the
/// concept's texture family but each draws its own parameters. Exemplar
/// masks cover the whole frame.
pub fn build_style_bank(concept: Concept, seed: u64, size: ImageSize) -> Result<StyleBank, SynthError> {
    size.validate()?;
    let mut rng = rng::stream(rng::derive_seed(seed, concept.tag()), tags::BANK);
    let exemplars = (0..EXEMPLARS_PER_BANK)
        .map(|_| {
            let texture = Texture::draw(concept, &mut rng);
            let image = texture_image(&texture, size, &mut rng);
            StyleExemplar {
                image,
                mask: Tensor::full(&size.mask_shape(), 1.0),
                texture,
            }
        })
        .collect();
    Ok(StyleBank { concept, exemplars })
}

/// Banks for every registered concept, in [`Concept::ALL`] order.
pub fn build_all_banks(seed: u64, size: ImageSize) -> Result<Vec<StyleBank>, SynthError> {
    Concept::ALL.iter().map(|&c| build_style_bank(c, seed, size)).collect()
}

/// Re-textures the masked region of `scene` with the exemplar's texture
/// process. Pixels outside the mask are copied unchanged.
pub fn apply_concept(scene: &Scene, exemplar: &StyleExemplar, rng: &mut Rng) -> Tensor {
    let mut out = scene.image.clone();
    let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
    let mask = scene.region_mask.data();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 1.0 {
                continue;
            }
            let c = exemplar.texture.pixel(y, x, rng);
            for (ch, v) in c.iter().enumerate() {
                out.data_mut()[(ch * h + y) * w + x] = *v;
            }
        }
    }
    out
}

/// Builds one edit example for concept/exemplar on the scene generated from
/// `scene_seed`.
pub fn make_example(
    scene_seed: u64,
    bank: &StyleBank,
    exemplar_index: usize,
    size: ImageSize,
) -> Result<EditExample, SynthError> {
    let scene = generate_scene(scene_seed, size)?;
    let style = bank.exemplars[exemplar_index % EXEMPLARS_PER_BANK].clone();
    let mut trng = rng::stream(scene_seed, tags::TEXTURE);
    let target = apply_concept(&scene, &style, &mut trng);
    Ok(EditExample {
        scene,
        concept: bank.concept,
        instruction: bank.concept.instruction(),
        exemplar_index: exemplar_index % EXEMPLARS_PER_BANK,
        style,
        target,
    })
}

/// `n` examples over `banks`, cycling concepts in bank order and, within each
/// concept, alternating through its five exemplars.
pub fn make_examples(
    n: usize,
    scene_seed: u64,
    banks: &[StyleBank],
    size: ImageSize,
) -> Result<Vec<EditExample>, SynthError> {
    if n == 0 || banks.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    (0..n)
        .map(|i| {
            let bank = &banks[i % banks.len()];
            let exemplar = (i / banks.len()) % EXEMPLARS_PER_BANK;
            make_example(rng::derive_seed(scene_seed, i as u64), bank, exemplar, size)
        })
        .collect()
}

/// `n` examples over all four concepts with banks and scenes derived from `seed`.
pub fn make_dataset(n: usize, seed: u64, size: ImageSize) -> Result<Vec<EditExample>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    let banks = build_all_banks(seed, size)?;
    make_examples(n, rng::derive_seed(seed, tags::SCENE), &banks, size)
}

/// Fraction of masked pixels whose channel mean exceeds [`SPECKLE_THRESHOLD`].
pub fn speckle_density(image: &Tensor, mask: &Tensor) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let c = image.shape()[0];
    let mut count = 0usize;
    let mut hits = 0usize;
    for p in 0..h * w {
        if mask.data()[p] != 1.0 {
            continue;
        }
        count += 1;
        let mean = (0..c).map(|ch| image.data()[ch * h * w + p]).sum::<f64>() / c as f64;
        if mean > SPECKLE_THRESHOLD {
            hits += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        hits as f64 / count as f64
    }
}

/// Fraction of mask entries equal to one.
pub fn mask_fraction(mask: &Tensor) -> f64 {
    mask.data().iter().filter(|&&m| m == 1.0).count() as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn size() -> ImageSize {
        ImageSize::default()
    }

    fn masked_mean(img: &Tensor, mask: &Tensor) -> [f64; 3] {
        let hw = mask.len();
        let n = mask.data().iter().sum::<f64>();
        std::array::from_fn(|c| {
            (0..hw)
                .filter(|&p| mask.data()[p] == 1.0)
                .map(|p| img.data()[c * hw + p])
                .sum::<f64>()
                / n
        })
    }

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(generate_scene(7, size()).unwrap(), generate_scene(7, size()).unwrap());
        assert_ne!(generate_scene(7, size()).unwrap(), generate_scene(8, size()).unwrap());
    }

    #[test]
    fn seed_zero_mask_fraction() {
        let s = generate_scene(0, size()).unwrap();
        let count = s.region_mask.data().iter().filter(|&&m| m == 1.0).count();
        let frac = count as f64 / 256.0;
        // even seed: bottom band of 16/3 = 5 rows
        assert_eq!(count, 5 * 16);
        assert!((0.10..=0.60).contains(&frac));
    }

    #[test]
    fn scene_invariants_over_many_seeds() {
        for seed in 0..200 {
            let s = generate_scene(seed, size()).unwrap();
            assert!(s.image.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
            assert!(s.region_mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            let f = mask_fraction(&s.region_mask);
            assert!((0.10..=0.60).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn unknown_concept_rejected() {
        assert_eq!("plaid".parse::<Concept>(), Err(SynthError::UnknownConcept("plaid".into())));
        assert_eq!("dense-snow".parse::<Concept>(), Ok(Concept::DenseSnow));
    }

    #[test]
    fn banks_have_five_exemplars_and_are_deterministic() {
        for c in Concept::ALL {
            let b = build_style_bank(c, 3, size()).unwrap();
            assert_eq!(b.exemplars.len(), 5);
            assert!(b.exemplars.iter().all(|e| e.mask.sum() > 0.0));
            assert_eq!(b, build_style_bank(c, 3, size()).unwrap());
        }
    }

    #[test]
    fn dense_snow_is_denser_than_sparse() {
        for seed in 0..10 {
            let mean_density = |c| {
                let b = build_style_bank(c, seed, size()).unwrap();
                b.exemplars.iter().map(|e| speckle_density(&e.image, &e.mask)).sum::<f64>() / 5.0
            };
            assert!(mean_density(Concept::DenseSnow) > mean_density(Concept::SparseSnow));
        }
    }

    #[test]
    fn empty_mask_edit_is_identity() {
        let mut s = generate_scene(4, size()).unwrap();
        s.region_mask = Tensor::zeros(&size().mask_shape());
        let bank = build_style_bank(Concept::Gold, 0, size()).unwrap();
        let out = apply_concept(&s, &bank.exemplars[0], &mut rng::seeded(1));
        assert_eq!(out, s.image);
    }

    #[test]
    fn gold_edit_moves_region_toward_hue() {
        let bank = build_style_bank(Concept::Gold, 0, size()).unwrap();
        let gold = [0.85, 0.55, -0.55];
        let dist = |m: [f64; 3]| m.iter().zip(gold).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        for seed in 0..20 {
            let s = generate_scene(seed, size()).unwrap();
            let out = apply_concept(&s, &bank.exemplars[seed as usize % 5], &mut rng::seeded(seed));
            assert!(dist(masked_mean(&out, &s.region_mask)) < dist(masked_mean(&s.image, &s.region_mask)));
        }
    }

    #[test]
    fn target_matches_input_outside_mask() {
        for ex in make_dataset(24, 11, size()).unwrap() {
            let hw = 256;
            for c in 0..3 {
                for p in 0..hw {
                    if ex.scene.region_mask.data()[p] == 0.0 {
                        assert_eq!(ex.target.data()[c * hw + p], ex.scene.image.data()[c * hw + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_cycles_concepts_and_exemplars() {
        let ds = make_dataset(20, 5, size()).unwrap();
        for c in Concept::ALL {
            let of: Vec<_> = ds.iter().filter(|e| e.concept == c).collect();
            assert_eq!(of.len(), 5);
            let idx: Vec<_> = of.iter().map(|e| e.exemplar_index).collect();
            assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(ds, make_dataset(20, 5, size()).unwrap());
        assert_eq!(make_dataset(0, 5, size()), Err(SynthError::EmptyDataset));
    }

    #[test]
    fn instruction_registry() {
        assert_eq!(Instruction::parse("gold"), Some(Instruction::GOLD));
        assert_eq!(Instruction::parse("1"), Some(Instruction::SNOW));
        assert_eq!(Instruction::parse("0"), None);
        assert_eq!(Instruction::parse("9"), None);
        assert_eq!(Concept::SparseSnow.instruction(), Concept::DenseSnow.instruction());
    }
}
