//! Paired `degraded/` + `clean/` image directories, with optional native
//! double-resolution targets in `clean_x2/`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::error::{Error, Result};
use crate::pipeline::image::load_image_resized;
use crate::tensor::Tensor;

pub type Pair = (Tensor<f32>, Tensor<f32>);

const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "png"];

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    /// `(degraded, clean)` paths in sorted filename order.
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// `clean_x2/` paths in the same order, when that directory exists.
    pub doubles: Option<Vec<PathBuf>>,
    pub size: (usize, usize),
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)));
        if is_image && path.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

impl PairedDataset {
    /// Pair every image in `dir/degraded` with the same filename in `dir/clean`.
    pub fn open(dir: &Path, size: (usize, usize)) -> Result<Self> {
        if !(size.0.is_power_of_two() && size.1.is_power_of_two()) {
            return Err(Error::Config(format!("target size {}x{} must be powers of two", size.0, size.1)));
        }
        let (ddir, cdir) = (dir.join("degraded"), dir.join("clean"));
        let degraded = list_images(&ddir)?;
        let clean = list_images(&cdir)?;
        if degraded != clean {
            let missing: Vec<&String> = degraded
                .iter()
                .filter(|n| !clean.contains(n))
                .chain(clean.iter().filter(|n| !degraded.contains(n)))
                .take(5)
                .collect();
            return Err(Error::Usage(format!(
                "{}: degraded/ and clean/ are not paired; unmatched files {missing:?}",
                dir.display()
            )));
        }
        if degraded.is_empty() {
            return Err(Error::Usage(format!("{}: no images in degraded/", dir.display())));
        }
        let xdir = dir.join("clean_x2");
        let doubles = if xdir.is_dir() {
            if list_images(&xdir)? != degraded {
                return Err(Error::Usage(format!(
                    "{}: clean_x2/ must hold exactly the file names of degraded/",
                    dir.display()
                )));
            }
            Some(degraded.iter().map(|n| xdir.join(n)).collect())
        } else {
            None
        };
        Ok(PairedDataset {
            pairs: degraded.iter().map(|n| (ddir.join(n), cdir.join(n))).collect(),
            doubles,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decode every pair on up to `threads` workers; the result keeps dataset order.
    pub fn load_all(&self, threads: usize) -> Result<Vec<Pair>> {
        let (h, w) = self.size;
        load_indexed(self.len(), threads, |i| {
            let (d, c) = &self.pairs[i];
            Ok((load_image_resized(d, h, w)?, load_image_resized(c, h, w)?))
        })
    }

    /// The `clean_x2/` targets at twice the target size, if the dataset has them.
    pub fn load_doubles(&self, threads: usize) -> Result<Option<Vec<Tensor<f32>>>> {
        let Some(paths) = &self.doubles else {
            return Ok(None);
        };
        let (h, w) = self.size;
        load_indexed(paths.len(), threads, |i| load_image_resized(&paths[i], 2 * h, 2 * w)).map(Some)
    }
}

fn load_indexed<V: Send>(n: usize, threads: usize, load: impl Fn(usize) -> Result<V> + Sync) -> Result<Vec<V>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(load).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<V>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(2 * threads);
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, load) = (&next, &load);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n || tx.send((i, load(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    slots.into_iter().map(|s| s.expect("every index loaded")).collect()
}

/// Worker count: `PHFM_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("PHFM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
