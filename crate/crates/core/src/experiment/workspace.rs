use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    derive_seed, normalize, sample_locations, zscore_stats, Dataset, Mask, PatchLocation, SamplingConfig, SlideIndex,
    ZScoreStats,
};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::tensor::Tensor;

/// A dataset with normalized renderings and patch indices, shared by every
/// stage of an experiment.
#[derive(Debug)]
pub struct Workspace {
    pub dataset: Dataset,
    pub stats: ZScoreStats,
    pub patch_size: usize,
    normalized: BTreeMap<(usize, usize), Tensor>,
    indices: BTreeMap<usize, SlideIndex>,
}

impl Workspace {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::build(config.dataset_manifest()?)?;
        Self::from_dataset(dataset, config.patch_size)
    }

    /// Normalization statistics come from the reference domain's training
    /// slides and are applied to every domain.
    pub fn from_dataset(dataset: Dataset, patch_size: usize) -> Result<Self> {
        let split = dataset.split().clone();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for &id in &split.train {
            images.push(dataset.render(id, split.reference_domain)?);
            masks.push(&dataset.slide(id)?.mask);
        }
        let stats = zscore_stats(&images, &masks)?;
        let mut normalized = BTreeMap::new();
        let mut indices = BTreeMap::new();
        for slide in dataset.slides() {
            for d in 0..dataset.num_domains() {
                normalized.insert(
                    (slide.slide_id, d),
                    normalize(dataset.render(slide.slide_id, d)?, &stats)?,
                );
            }
            indices.insert(
                slide.slide_id,
                SlideIndex::new(slide.slide_id, &slide.mask, patch_size)?,
            );
        }
        Ok(Self {
            dataset,
            stats,
            patch_size,
            normalized,
            indices,
        })
    }

    pub fn normalized(&self, slide_id: usize, domain: usize) -> Result<&Tensor> {
        self.normalized
            .get(&(slide_id, domain))
            .ok_or_else(|| Error::Data(format!("no rendering of slide {slide_id} in domain {domain}")))
    }

    pub fn mask(&self, slide_id: usize) -> Result<&Mask> {
        Ok(&self.dataset.slide(slide_id)?.mask)
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.dataset.manifest.profiles.iter().map(|p| p.name.clone()).collect()
    }

    /// Patch locations over `slides`, deterministic in `seed`.
    pub fn locations(&self, slides: &[usize], per_slide: usize, bg_frac: f64, seed: u64) -> Result<Vec<PatchLocation>> {
        let idx = slides
            .iter()
            .map(|id| {
                self.indices
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("slide {id} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = SamplingConfig {
            patch_size: self.patch_size,
            per_slide,
            bg_frac,
        };
        sample_locations(&idx, &cfg, seed)
    }

    /// Fixed validation patches for one experiment seed.
    pub fn validation_locations(&self, config: &ExperimentConfig, seed: u64) -> Result<Vec<PatchLocation>> {
        let ft = &config.finetune;
        self.locations(
            &self.dataset.split().val.clone(),
            ft.val_per_slide,
            ft.bg_frac,
            derive_seed(seed, "validation-patches", 0),
        )
    }

    /// Stacks normalized patches into `B×3×P×P` plus their labels in
    /// `B×P×P` order. `domains[i]` selects the rendering of `locs[i]`.
    pub fn batch(&self, locs: &[PatchLocation], domains: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        if locs.len() != domains.len() {
            return Err(Error::Contract("one domain per location required".into()));
        }
        let p = self.patch_size;
        let mut data = Vec::with_capacity(locs.len() * 3 * p * p);
        let mut labels = Vec::with_capacity(locs.len() * p * p);
        for (loc, &d) in locs.iter().zip(domains) {
            let img = self.normalized(loc.slide_id, d)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            if loc.x + p > w || loc.y + p > h {
                return Err(Error::dim(format!("patch at ({}, {}) outside slide", loc.x, loc.y)));
            }
            let src = img.data();
            for c in 0..3 {
                for row in loc.y..loc.y + p {
                    let s = c * h * w + row * w + loc.x;
                    data.extend_from_slice(&src[s..s + p]);
                }
            }
            let mask = self.mask(loc.slide_id)?;
            for row in loc.y..loc.y + p {
                labels.extend_from_slice(&mask.labels[row * w + loc.x..row * w + loc.x + p]);
            }
        }
        Ok((Tensor::new([locs.len(), 3, p, p], data)?, labels))
    }

    pub fn batch_in(&self, locs: &[PatchLocation], domain: usize) -> Result<(Tensor, Vec<u8>)> {
        self.batch(locs, &vec![domain; locs.len()])
    }
}

/// Seeded generator for one named random stream of an experiment seed.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
