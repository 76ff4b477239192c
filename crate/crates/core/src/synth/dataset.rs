//! Corpora of source images and on-disk pair datasets.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{make_labels, make_pair, sigma_for, stream_rng, PairConfig, PixelBox, Provenance, SourceRecord, TrainingPair};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{load_image, save_image, Image};

// Source draws per pair before giving up.
const MAX_DRAWS: usize = 50;

/// Source images held in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    boxes: Vec<Option<PixelBox>>,
    images: Vec<Image>,
}

impl ImageCorpus {
    pub fn load(records: &[SourceRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        let images = records
            .iter()
            .map(|r| Ok(load_image(&r.image)?.to_rgb()))
            .collect::<Result<Vec<_>>>()?;
        let boxes = records.iter().map(|r| r.bbox.map(PixelBox::from_record)).collect();
        Ok(ImageCorpus { boxes, images })
    }

    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        Ok(ImageCorpus {
            boxes: vec![None; images.len()],
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pair number `index` of the stream for `seed`: a random source, its
    /// annotated box if any, resampled on rejection.
    pub fn pair(&self, seed: u64, index: u64, cfg: &PairConfig) -> Result<TrainingPair> {
        let mut rng = stream_rng(seed, index);
        for _ in 0..MAX_DRAWS {
            let k = rng.gen_range(0..self.images.len());
            match make_pair(&self.images[k], self.boxes[k], cfg, &mut rng) {
                Err(Error::Rejected(_)) => continue,
                other => return other,
            }
        }
        Err(Error::invalid(format!(
            "corpus exhausted: no valid pair for index {index} after {MAX_DRAWS} draws"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: usize,
    pub template: String,
    pub search: String,
    pub gt: Pose,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelSummary {
    gt: Pose,
    template_size: (usize, usize),
    sigma0: f64,
    s_max: f64,
    n_valid: usize,
}

/// Writes pairs as `pair_NNNNN/{template,search,heatmap}.png` plus
/// `labels.json`, and an `index.jsonl` listing them. Returns the count.
pub fn write_dataset(
    dir: &Path,
    pairs: impl IntoIterator<Item = Result<TrainingPair>>,
    sigma_ratio: f64,
    s_max: f64,
) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    let mut n = 0;
    for (id, pair) in pairs.into_iter().enumerate() {
        let pair = pair?;
        let name = format!("pair_{id:05}");
        let pdir = dir.join(&name);
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        save_image(&pair.template, pdir.join("template.png"))?;
        save_image(&pair.search, pdir.join("search.png"))?;
        let tsize = (pair.template.width(), pair.template.height());
        let sigma0 = sigma_for(tsize, sigma_ratio);
        let (sw, sh) = (pair.search.width(), pair.search.height());
        let labels = make_labels(&[pair.gt], tsize, (sw, sh), sigma0, s_max)?;
        let heat = Image::from_vec(sw, sh, 1, labels.heatmap.clone())?;
        save_image(&heat, pdir.join("heatmap.png"))?;
        let summary = LabelSummary {
            gt: pair.gt,
            template_size: tsize,
            sigma0,
            s_max,
            n_valid: labels.n_valid(),
        };
        let lpath = pdir.join("labels.json");
        std::fs::write(&lpath, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&lpath, e))?;
        let entry = PairEntry {
            id,
            template: format!("{name}/template.png"),
            search: format!("{name}/search.png"),
            gt: pair.gt,
            provenance: pair.provenance,
        };
        index.push_str(&serde_json::to_string(&entry)?);
        index.push('\n');
        n += 1;
    }
    let ipath = dir.join("index.jsonl");
    std::fs::write(&ipath, index).map_err(|e| Error::io(&ipath, e))?;
    Ok(n)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<TrainingPair>> {
    let ipath = dir.join("index.jsonl");
    let text = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: PairEntry = serde_json::from_str(line).map_err(|err| Error::Manifest {
            line: i + 1,
            message: err.to_string(),
        })?;
        out.push(TrainingPair {
            template: load_image(dir.join(&e.template))?,
            search: load_image(dir.join(&e.search))?,
            gt: e.gt,
            provenance: e.provenance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::generate_scene;

    fn corpus() -> ImageCorpus {
        ImageCorpus::from_images((0..3).map(|i| generate_scene(200, 200, 1, i)).collect()).unwrap()
    }

    #[test]
    fn pair_stream_is_deterministic() {
        let c = corpus();
        let cfg = PairConfig {
            template_size: Some((36, 36)),
            scale_range: Some((0.8, 1.5)),
            ..Default::default()
        };
        let a = c.pair(3, 7, &cfg).unwrap();
        assert_eq!(a, c.pair(3, 7, &cfg).unwrap());
        assert_ne!(a, c.pair(3, 8, &cfg).unwrap());
        assert_eq!((a.template.width(), a.search.width()), (36, 128));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        let cfg = PairConfig {
            template_size: Some((36, 36)),
            scale_range: Some((0.8, 1.5)),
            ..Default::default()
        };
        let n = write_dataset(dir.path(), (0..3).map(|i| c.pair(1, i, &cfg)), 1.0 / 6.0, 2.5).unwrap();
        assert_eq!(n, 3);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        let orig = c.pair(1, 2, &cfg).unwrap();
        assert_eq!(back[2].gt, orig.gt);
        for (a, b) in back[2].search.data().iter().zip(orig.search.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        let empty = dir.path().join("empty");
        assert_eq!(write_dataset(&empty, std::iter::empty(), 1.0 / 6.0, 2.5).unwrap(), 0);
        assert!(read_dataset(&empty).unwrap().is_empty());
    }
}
