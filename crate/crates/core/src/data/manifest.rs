use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, generate_slide, render_domain, write_pgm, write_ppm, Grayscale, ScannerProfile, VirtualSlide,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub id: usize,
    pub seed: u64,
}

/// Slide-level split and domain roles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Domain whose annotations and normalization statistics anchor training.
    pub reference_domain: usize,
    /// Domains allowed in training batches, reference included.
    pub train_domains: Vec<usize>,
    pub heldout_domains: Vec<usize>,
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub slide_size: usize,
    #[serde(default)]
    pub grayscale: Grayscale,
    pub split: SplitSpec,
    pub slides: Vec<SlideEntry>,
    pub profiles: Vec<ScannerProfile>,
}

impl DatasetManifest {
    /// Five default scanners (reference + 2 seen + 2 held-out) and slides
    /// numbered consecutively train, then val, then test.
    pub fn new(seed: u64, slide_size: usize, n_train: usize, n_val: usize, n_test: usize) -> Self {
        let n = n_train + n_val + n_test;
        let slides = (0..n)
            .map(|id| SlideEntry {
                id,
                // TOML integers are signed 64-bit.
                seed: derive_seed(seed, "slide", id as u64) >> 1,
            })
            .collect();
        Self {
            version: MANIFEST_VERSION,
            seed,
            slide_size,
            grayscale: Grayscale::default(),
            split: SplitSpec {
                train: (0..n_train).collect(),
                val: (n_train..n_train + n_val).collect(),
                test: (n_train + n_val..n).collect(),
                reference_domain: 0,
                train_domains: vec![0, 1, 2],
                heldout_domains: vec![3, 4],
            },
            slides,
            profiles: ScannerProfile::desk_defaults(),
        }
    }

    /// 256-pixel slides split 12/3/5.
    pub fn desk(seed: u64) -> Self {
        Self::new(seed, 256, 12, 3, 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        if self.slide_size < 16 {
            return Err(Error::Config(format!("slide size {} too small", self.slide_size)));
        }
        let ids: BTreeSet<usize> = self.slides.iter().map(|s| s.id).collect();
        if ids.len() != self.slides.len() {
            return Err(Error::Config("duplicate slide ids".into()));
        }
        let sp = &self.split;
        let mut seen = BTreeSet::new();
        for id in sp.train.iter().chain(&sp.val).chain(&sp.test) {
            if !ids.contains(id) {
                return Err(Error::Config(format!("split references unknown slide {id}")));
            }
            if !seen.insert(*id) {
                return Err(Error::Config(format!("slide {id} appears in more than one split")));
            }
        }
        if sp.train.is_empty() || sp.val.is_empty() || sp.test.is_empty() {
            return Err(Error::Config("train, val and test splits must be non-empty".into()));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.domain_id != i {
                return Err(Error::Config(format!(
                    "profile {} has domain id {} at position {i}",
                    p.name, p.domain_id
                )));
            }
            p.validate()?;
        }
        let n_dom = self.profiles.len();
        let in_range = |d: &usize| *d < n_dom;
        if !sp.train_domains.iter().chain(&sp.heldout_domains).all(in_range) || !in_range(&sp.reference_domain) {
            return Err(Error::Config("split references unknown domain".into()));
        }
        if !sp.train_domains.contains(&sp.reference_domain) {
            return Err(Error::Config("reference domain must be a training domain".into()));
        }
        if sp.train_domains.iter().any(|d| sp.heldout_domains.contains(d)) {
            return Err(Error::Config("a domain is both training and held-out".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn slide_seed(&self, id: usize) -> Option<u64> {
        self.slides.iter().find(|s| s.id == id).map(|s| s.seed)
    }
}

/// Slides and their renderings in every domain, regenerated from a manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    slides: Vec<VirtualSlide>,
    /// `renders[slide position][domain]`.
    renders: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn build(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let mut slides = Vec::with_capacity(manifest.slides.len());
        let mut renders = Vec::with_capacity(manifest.slides.len());
        for entry in &manifest.slides {
            let slide = generate_slide(entry.id, entry.seed, manifest.slide_size)?;
            let r = manifest
                .profiles
                .iter()
                .map(|p| render_domain(&slide, p))
                .collect::<Result<Vec<_>>>()?;
            slides.push(slide);
            renders.push(r);
        }
        Ok(Self {
            manifest,
            slides,
            renders,
        })
    }

    fn position(&self, slide_id: usize) -> Result<usize> {
        self.slides
            .iter()
            .position(|s| s.slide_id == slide_id)
            .ok_or_else(|| Error::Data(format!("slide {slide_id} not in dataset")))
    }

    pub fn slide(&self, slide_id: usize) -> Result<&VirtualSlide> {
        Ok(&self.slides[self.position(slide_id)?])
    }

    pub fn slides(&self) -> &[VirtualSlide] {
        &self.slides
    }

    pub fn render(&self, slide_id: usize, domain: usize) -> Result<&Tensor> {
        let pos = self.position(slide_id)?;
        self.renders[pos]
            .get(domain)
            .ok_or_else(|| Error::Data(format!("slide {slide_id} has no rendering in domain {domain}")))
    }

    pub fn num_domains(&self) -> usize {
        self.manifest.profiles.len()
    }

    pub fn split(&self) -> &SplitSpec {
        &self.manifest.split
    }

    /// Writes `manifest.toml`, one PPM per slide and domain, and one PGM mask
    /// per slide.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.save(&dir.join("manifest.toml"))?;
        for (slide, renders) in self.slides.iter().zip(&self.renders) {
            write_pgm(&dir.join(format!("slide{:03}_mask.pgm", slide.slide_id)), &slide.mask)?;
            for (d, img) in renders.iter().enumerate() {
                let name = &self.manifest.profiles[d].name;
                write_ppm(&dir.join(format!("slide{:03}_{name}.ppm", slide.slide_id)), img)?;
            }
        }
        Ok(())
    }
}
