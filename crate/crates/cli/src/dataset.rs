//! On-disk synthetic dataset: a JSONL manifest plus one tensor container per
//! split, and a tiled slide for the annotation pipeline.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use histogen_core::io::{load_tensors, save_tensors};
use histogen_core::synthdata::{gen_dataset, gen_slide, Texture};
use histogen_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::{io_err, CliError};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SLIDE: &str = "slide.icdt";
/// Slide side in tiles; 4×4 tiles of 32 px cut into 16 px patches gives 64 patches.
pub const SLIDE_TILES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub caption: String,
    pub caption_ids: Vec<usize>,
    pub label: usize,
    pub texture: Texture,
    pub nuclei: usize,
}

#[derive(Clone, Debug)]
pub struct Item {
    pub entry: ManifestEntry,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub eval: Vec<Item>,
}

/// Root seed of a split, derived from the run seed.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    Rng::new(seed).split(split.stream()).next_u64()
}

pub fn slide_seed(seed: u64) -> u64 {
    Rng::new(seed).split(3).next_u64()
}

fn tensor_name(kind: &str, i: usize) -> String {
    format!("{kind}/{i:05}")
}

/// Generates both splits in memory.
pub fn generate(seed: u64, n_train: usize, n_eval: usize) -> Dataset {
    let make = |split: Split, n: usize| {
        gen_dataset(n, split_seed(seed, split))
            .into_iter()
            .enumerate()
            .map(|(index, s)| Item {
                entry: ManifestEntry {
                    split,
                    index,
                    seed: s.seed,
                    caption: s.caption(),
                    caption_ids: s.caption_ids.clone(),
                    label: s.label,
                    texture: s.texture,
                    nuclei: s.blobs.len(),
                },
                image: s.image,
                mask: s.mask,
            })
            .collect::<Vec<_>>()
    };
    Dataset {
        train: make(Split::Train, n_train),
        eval: make(Split::Eval, n_eval),
    }
}

pub fn write(dir: &Path, data: &Dataset, seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut out = fs::File::create(&manifest).map_err(|e| io_err(&manifest, e))?;
    for item in data.train.iter().chain(&data.eval) {
        let line = serde_json::to_string(&item.entry).expect("manifest entry serializes");
        writeln!(out, "{line}").map_err(|e| io_err(&manifest, e))?;
    }
    for (split, items) in [(Split::Train, &data.train), (Split::Eval, &data.eval)] {
        let names: Vec<(String, String)> = (0..items.len())
            .map(|i| (tensor_name("image", i), tensor_name("mask", i)))
            .collect();
        let entries = items
            .iter()
            .zip(&names)
            .flat_map(|(it, (ni, nm))| [(ni.as_str(), &it.image), (nm.as_str(), &it.mask)]);
        save_tensors(&dir.join(format!("{}.icdt", split.name())), entries)?;
    }
    let (slide, _) = gen_slide(slide_seed(seed), SLIDE_TILES, SLIDE_TILES);
    save_tensors(&dir.join(SLIDE), [("slide", &slide)])?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<Dataset, CliError> {
    let manifest = dir.join(MANIFEST);
    let file = fs::File::open(&manifest).map_err(|e| io_err(&manifest, e))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            CliError::Core(histogen_core::Error::Format(format!("{} line {}: {e}", manifest.display(), n + 1)))
        })?;
        entries.push(entry);
    }
    let mut data = Dataset::default();
    for split in [Split::Train, Split::Eval] {
        let path = dir.join(format!("{}.icdt", split.name()));
        if !path.exists() {
            return Err(io_err(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut tensors: std::collections::HashMap<String, Tensor> = load_tensors(&path)?.into_iter().collect();
        let items = entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mut take = |kind: &str| {
                    tensors.remove(&tensor_name(kind, e.index)).ok_or_else(|| {
                        CliError::Core(histogen_core::Error::Format(format!(
                            "{} has no {kind} for {} sample {}",
                            path.display(),
                            split.name(),
                            e.index
                        )))
                    })
                };
                Ok(Item {
                    image: take("image")?,
                    mask: take("mask")?,
                    entry: e.clone(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        match split {
            Split::Train => data.train = items,
            Split::Eval => data.eval = items,
        }
    }
    Ok(data)
}

pub fn read_slide(dir: &Path) -> Result<Tensor, CliError> {
    let path = dir.join(SLIDE);
    if !path.exists() {
        return Err(io_err(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(histogen_core::io::load_tensor(&path, "slide")?)
}
