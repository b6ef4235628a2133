use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::synth::{homography_pair, mix64, two_view_pair, ImageTexture, ProceduralTexture, Texture};
use crate::geometry::{HomographyBounds, SyntheticPair};
use crate::imageio::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    Homography,
    TwoView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory used by train / eval (and written by gen-data).
    pub dir: Option<String>,
    /// Held-out corpus for periodic and final evaluation.
    pub eval_dir: Option<String>,
    pub pairs: usize,
    pub width: usize,
    pub height: usize,
    pub mode: PairMode,
    /// Directory of source photographs; procedural textures when absent.
    pub images: Option<String>,
    pub bounds: HomographyBounds,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            eval_dir: None,
            pairs: 16,
            width: 256,
            height: 256,
            mode: PairMode::Homography,
            images: None,
            bounds: HomographyBounds::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(invalid!("data.pairs must be positive"));
        }
        if self.width < 32 || self.height < 32 {
            return Err(invalid!("data.width and data.height must be at least 32"));
        }
        Ok(())
    }
}

pub fn pair_stem(i: usize) -> String {
    format!("pair_{i:05}")
}

fn source_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| invalid!("cannot read image directory {}: {e}", dir.display()))? {
        let p = e?.path();
        let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(invalid!("image directory {} contains no PNG or JPEG files", dir.display()));
    }
    files.sort();
    Ok(files)
}

/// Pair `i` of a corpus; its content depends only on `(seed, i)` and the config.
pub fn make_pair(cfg: &DataConfig, images: &[PathBuf], seed: u64, i: usize) -> Result<SyntheticPair> {
    let s = mix64(seed ^ mix64(i as u64 + 1));
    let tex: Box<dyn Texture> = if images.is_empty() {
        Box::new(ProceduralTexture::new(s, cfg.width, cfg.height))
    } else {
        let img = Image::load(&images[(s % images.len() as u64) as usize])?;
        Box::new(ImageTexture(img.resize(cfg.width, cfg.height)))
    };
    match cfg.mode {
        PairMode::Homography => homography_pair(s, cfg.width, cfg.height, &cfg.bounds, tex.as_ref()),
        PairMode::TwoView => two_view_pair(s, cfg.width, cfg.height, tex.as_ref()),
    }
}

/// Writes `cfg.pairs` pairs named `pair_00000 ..` into `out`.
pub fn gen_data(cfg: &DataConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate()?;
    let images = match &cfg.images {
        Some(d) => source_images(Path::new(d))?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out)?;
    let mut stems = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let stem = pair_stem(i);
        make_pair(cfg, &images, seed, i)?.save(out, &stem)?;
        log::debug!("wrote {}", stem);
        stems.push(stem);
    }
    Ok(stems)
}

/// Every pair of a corpus directory, in name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<SyntheticPair>> {
    let stems = SyntheticPair::list(dir).map_err(|e| invalid!("cannot list corpus {}: {e}", dir.display()))?;
    if stems.is_empty() {
        return Err(invalid!("corpus {} contains no pairs", dir.display()));
    }
    stems.iter().map(|s| SyntheticPair::load(dir, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Truth;

    fn small(mode: PairMode) -> DataConfig {
        DataConfig { pairs: 2, width: 48, height: 40, mode, ..Default::default() }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_data(&small(PairMode::Homography), d1.path(), 5).unwrap();
        gen_data(&small(PairMode::Homography), d2.path(), 5).unwrap();
        for f in ["pair_00000_a.png", "pair_00000_b.png", "pair_00001.json"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        let pairs = load_corpus(d1.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(matches!(pairs[0].truth, Truth::Homography(_)));
        assert_ne!(pairs[0].image_a, pairs[1].image_a);
    }

    #[test]
    fn two_view_truth_fields() {
        let d = tempfile::tempdir().unwrap();
        gen_data(&DataConfig { pairs: 1, ..small(PairMode::TwoView) }, d.path(), 1).unwrap();
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(d.path().join("pair_00000.json")).unwrap()).unwrap();
        for k in ["k", "r", "t", "depth_a", "depth_b"] {
            assert!(v.get(k).is_some(), "{k} missing from {v}");
        }
    }

    #[test]
    fn empty_image_dir_is_an_error() {
        let (src, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = DataConfig { images: Some(src.path().display().to_string()), ..small(PairMode::Homography) };
        assert!(gen_data(&cfg, out.path(), 0).unwrap_err().is_validation());
    }

    #[test]
    fn image_source_is_used() {
        let (src, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let img = Image::from_fn(30, 20, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        img.save_png(&src.path().join("x.png")).unwrap();
        let cfg = DataConfig { images: Some(src.path().display().to_string()), ..small(PairMode::Homography) };
        gen_data(&cfg, out.path(), 0).unwrap();
        assert_eq!(load_corpus(out.path()).unwrap()[1].size(), (48, 40));
    }
}
