//! Labeled clip pools: directory ingestion, stratified train/test splits and
//! feature extraction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};
use crate::features::{self, FeatureError, FeatureParams, Grid};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} is not a readable directory")]
    MissingRoot(PathBuf),
    #[error("class directory `{class}` not found under {root}")]
    MissingClass { class: String, root: PathBuf },
    #[error("class directory `{class}` contains no .wav files")]
    EmptyClass { class: String },
    #[error("no class directories under {0}")]
    NoClasses(PathBuf),
    #[error("cannot decode {path}: {source}")]
    Undecodable {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class `{class}` has {available} clips, at least {needed} required")]
    TooFewClips {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("feature extraction failed for {id}: {source}")]
    Features {
        id: String,
        #[source]
        source: FeatureError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    /// Stable identity, e.g. `class/file.wav`.
    pub id: String,
    pub class: usize,
    pub clip: AudioClip,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipPool {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledClip>,
}

impl ClipPool {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for item in &self.items {
            counts[item.class] += 1;
        }
        counts
    }

    /// Keeps only the named classes, relabelled in the given order.
    pub fn select_classes(&self, names: &[String]) -> Option<ClipPool> {
        let mapping: Vec<usize> = names
            .iter()
            .map(|n| self.class_names.iter().position(|c| c == n))
            .collect::<Option<_>>()?;
        let items = self
            .items
            .iter()
            .filter_map(|item| {
                mapping.iter().position(|&m| m == item.class).map(|new| LabeledClip {
                    class: new,
                    ..item.clone()
                })
            })
            .collect();
        Some(ClipPool {
            class_names: names.to_vec(),
            items,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPool {
    pub train: ClipPool,
    pub test: ClipPool,
}

/// Splits every class separately: `round(n × test_fraction)` clips (at least
/// one) go to the test side, chosen by a seeded shuffle.
pub fn split_stratified(pool: &ClipPool, test_fraction: f64, seed: u64) -> SplitPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ClipPool {
        class_names: pool.class_names.clone(),
        items: Vec::new(),
    };
    let mut test = train.clone();
    for class in 0..pool.class_names.len() {
        let mut members: Vec<&LabeledClip> =
            pool.items.iter().filter(|i| i.class == class).collect();
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize)
            .max(1)
            .min(members.len());
        let n_train = members.len() - n_test;
        train.items.extend(members[..n_train].iter().map(|&c| c.clone()));
        test.items.extend(members[n_train..].iter().map(|&c| c.clone()));
    }
    SplitPool { train, test }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Class directories to read, in label order; all subdirectories
    /// (sorted) when `None`.
    pub classes: Option<Vec<String>>,
    /// Skip files that fail to decode instead of failing.
    pub skip_undecodable: bool,
}

/// Reads `root/<class>/*.wav`. Files are visited in lexicographic order and
/// every clip is resampled to the canonical rate and normalized to 1 s.
pub fn ingest_directory(root: impl AsRef<Path>, opts: &IngestOptions) -> Result<ClipPool, DatasetError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let class_names = match &opts.classes {
        Some(names) => names.clone(),
        None => {
            let mut names: Vec<String> = read_dir_sorted(root)?
                .into_iter()
                .filter(|p| p.is_dir())
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(DatasetError::NoClasses(root.to_path_buf()));
            }
            names
        }
    };
    let mut items = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(DatasetError::MissingClass {
                class: class.clone(),
                root: root.to_path_buf(),
            });
        }
        let files: Vec<PathBuf> = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
            })
            .collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass {
                class: class.clone(),
            });
        }
        let before = items.len();
        for path in files {
            let decoded = audio::load_wav(&path).and_then(|c| audio::prepare_clip(&c));
            match decoded {
                Ok(clip) => {
                    let file = path.file_name().unwrap_or_default().to_string_lossy();
                    items.push(LabeledClip {
                        id: format!("{class}/{file}"),
                        class: label,
                        clip,
                    });
                }
                Err(_) if opts.skip_undecodable => {}
                Err(source) => return Err(DatasetError::Undecodable { path, source }),
            }
        }
        if items.len() == before {
            return Err(DatasetError::EmptyClass {
                class: class.clone(),
            });
        }
    }
    Ok(ClipPool { class_names, items })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    paths.sort();
    Ok(paths)
}

/// Writes a pool as `root/<class>/<n>.wav` (16-bit PCM), the layout
/// [`ingest_directory`] reads.
pub fn persist_pool(pool: &ClipPool, root: impl AsRef<Path>) -> Result<(), DatasetError> {
    let root = root.as_ref();
    for class in &pool.class_names {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut next = vec![0usize; pool.class_names.len()];
    for item in &pool.items {
        let class = &pool.class_names[item.class];
        let path = root.join(class).join(format!("{:05}.wav", next[item.class]));
        next[item.class] += 1;
        audio::save_wav(&path, &item.clip)
            .map_err(|source| DatasetError::Undecodable { path, source })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramItem {
    pub id: String,
    pub class: usize,
    pub grid: Grid,
}

/// Network-ready inputs with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpectrogramPool {
    pub class_names: Vec<String>,
    pub items: Vec<SpectrogramItem>,
}

impl SpectrogramPool {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.class).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for item in &self.items {
            counts[item.class] += 1;
        }
        counts
    }

    /// Keeps only the named classes, relabelled in the given order.
    pub fn select_classes(&self, names: &[String]) -> Option<SpectrogramPool> {
        let mapping: Vec<usize> = names
            .iter()
            .map(|n| self.class_names.iter().position(|c| c == n))
            .collect::<Option<_>>()?;
        let items = self
            .items
            .iter()
            .filter_map(|item| {
                mapping.iter().position(|&m| m == item.class).map(|new| SpectrogramItem {
                    class: new,
                    ..item.clone()
                })
            })
            .collect();
        Some(SpectrogramPool {
            class_names: names.to_vec(),
            items,
        })
    }
}

pub fn featurize(pool: &ClipPool, params: &FeatureParams) -> Result<SpectrogramPool, DatasetError> {
    let items = pool
        .items
        .iter()
        .map(|item| {
            features::mel_spectrogram(&item.clip, params)
                .map(|spec| SpectrogramItem {
                    id: item.id.clone(),
                    class: item.class,
                    grid: spec.values,
                })
                .map_err(|source| DatasetError::Features {
                    id: item.id.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(SpectrogramPool {
        class_names: pool.class_names.clone(),
        items,
    })
}
