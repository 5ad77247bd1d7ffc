//! On-disk dataset: `scores.txt` (one score per line), `grids/item_NNNN.melg`
//! and `manifest.txt` listing `id split grid-path` per item.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use shallowdiff_core::score::{format_scores, parse_scores};
use shallowdiff_core::synth::{self, SynthDataset};
use shallowdiff_core::{Grid, MusicScore};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::gridfile;

pub const SCORES: &str = "scores.txt";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub split: Split,
    pub score: MusicScore,
    pub target: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn pairs(&self, split: Split) -> Vec<(MusicScore, Grid)> {
        self.split(split)
            .into_iter()
            .map(|i| (i.score.clone(), i.target.clone()))
            .collect()
    }

    pub fn item(&self, id: usize) -> Result<&Item> {
        self.items
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| PipelineError::Missing(format!("dataset item {id}")))
    }
}

pub fn grid_name(id: usize) -> String {
    format!("item_{id:04}.melg")
}

/// Generates the synthetic dataset and writes it under `cfg.dataset_dir`.
pub fn generate(cfg: &RunConfig) -> Result<SynthDataset> {
    let ds = synth::generate(&cfg.synth_spec())?;
    let dir = &cfg.dataset_dir;
    let train = cfg.train_items();
    let mut manifest = String::from("# id split grid\n");
    for (id, item) in ds.items.iter().enumerate() {
        let rel = Path::new("grids").join(grid_name(id));
        gridfile::write(&dir.join(&rel), &item.target)?;
        let split = if id < train { Split::Train } else { Split::Holdout };
        let _ = writeln!(manifest, "{id} {} {}", split.name(), rel.display());
    }
    let scores: Vec<MusicScore> = ds.items.iter().map(|i| i.score.clone()).collect();
    gridfile::write_atomic(&dir.join(SCORES), format_scores(&scores).as_bytes())?;
    gridfile::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(ds)
}

pub fn read_scores(path: &Path) -> Result<Vec<MusicScore>> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    parse_scores(&text).map_err(|e| PipelineError::format(path, e.to_string()))
}

/// Loads the dataset and checks it against the configured grid shape and
/// vocabulary sizes.
pub fn load(cfg: &RunConfig) -> Result<Dataset> {
    let dir = &cfg.dataset_dir;
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(PipelineError::Missing(format!(
            "dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    let scores = read_scores(&dir.join(SCORES))?;
    let text = std::fs::read_to_string(&mpath).map_err(|e| PipelineError::io(&mpath, e))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |r: String| PipelineError::format(&mpath, format!("line {}: {r}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, split, rel] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
        let split = match split {
            "train" => Split::Train,
            "holdout" => Split::Holdout,
            s => return Err(bad(format!("unknown split {s:?}"))),
        };
        let score = scores
            .get(id)
            .ok_or_else(|| bad(format!("item {id} has no score ({} scores)", scores.len())))?
            .clone();
        let gpath: PathBuf = dir.join(rel);
        let target = gridfile::read(&gpath)?;
        if target.dims() != (cfg.frames, cfg.bins) {
            return Err(PipelineError::format(
                &gpath,
                format!(
                    "grid is {}x{}, config expects {}x{}",
                    target.frames(),
                    target.bins(),
                    cfg.frames,
                    cfg.bins
                ),
            ));
        }
        target.check_clean().map_err(|e| PipelineError::format(&gpath, e.to_string()))?;
        if score.frames() != target.frames() {
            return Err(bad(format!(
                "score durations sum to {} frames, grid has {}",
                score.frames(),
                target.frames()
            )));
        }
        score.check_vocab(cfg.vocab, cfg.pitch_vocab)?;
        items.push(Item {
            id,
            split,
            score,
            target,
        });
    }
    if items.is_empty() {
        return Err(PipelineError::Missing(format!("items in {}", mpath.display())));
    }
    Ok(Dataset { items })
}
