//! Dataset loading for the source and target tasks of an experiment.

use rtransfer_core::data::{load_idx, parse_cifar, stratified_subset, synth_blobs, synth_glyphs, BlobSpec, GlyphSpec};
use rtransfer_core::error::Error;
use rtransfer_core::{Dataset, Split};

use crate::config::{DataFormat, DataSection};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Source,
    Target,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Source => "source",
            Task::Target => "target",
        }
    }
}

fn read_all(paths: &[std::path::PathBuf]) -> rtransfer_core::Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(std::fs::read(p).map_err(|e| Error::Io { path: p.clone(), source: e })?);
    }
    Ok(bytes)
}

/// The full ten-class split before class selection.
pub fn load_split(d: &DataSection, split: Split) -> rtransfer_core::Result<Dataset> {
    let per_class = match split {
        Split::Train => d.per_class,
        Split::Test => d.test_per_class,
    };
    match d.format {
        DataFormat::Glyphs => synth_glyphs(
            &GlyphSpec {
                per_class,
                side: 16,
                noise: d.noise.unwrap_or(0.15),
                seed: d.seed,
            },
            split,
        ),
        DataFormat::Blobs => {
            let classes = d.source_classes.iter().chain(&d.target_classes).max().map_or(2, |m| m + 1);
            synth_blobs(
                &BlobSpec {
                    classes,
                    per_class,
                    dims: d.dims.unwrap_or(classes.max(2)),
                    separation: d.separation.unwrap_or(0.5),
                    noise: d.noise.unwrap_or(0.1),
                    seed: d.seed,
                },
                split,
            )
        }
        DataFormat::Idx => {
            let files = match split {
                Split::Train => d.train_idx.as_ref(),
                Split::Test => d.test_idx.as_ref(),
            }
            .expect("validated");
            load_idx(&files[0], &files[1], split)
        }
        DataFormat::Cifar => {
            let files = match split {
                Split::Train => &d.train_files,
                Split::Test => &d.test_files,
            };
            parse_cifar(&read_all(files)?, split)
        }
    }
}

/// Training or test data of one task, relabelled `0..classes`; the target
/// training split is subsampled to `data.fraction`.
pub fn load_task(d: &DataSection, task: Task, split: Split) -> rtransfer_core::Result<Dataset> {
    let classes = match task {
        Task::Source => &d.source_classes,
        Task::Target => &d.target_classes,
    };
    let ds = load_split(d, split)?.select_classes(classes)?;
    if task == Task::Target && split == Split::Train && d.fraction < 1.0 {
        return stratified_subset(&ds, d.fraction, d.seed);
    }
    Ok(ds)
}
