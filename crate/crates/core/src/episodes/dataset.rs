use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::pnm;
use super::scene::Scene;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# image\tmask\thidden_mask\tclass_id\thidden_class_ids\thidden_instances\thidden_pixels";

/// One manifest line. Hidden objects are counted both as instances and as
/// pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub hidden_mask: String,
    pub class_id: usize,
    pub hidden_class_ids: Vec<usize>,
    pub hidden_instances: usize,
    pub hidden_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let hidden = if r.hidden_class_ids.is_empty() {
                "-".to_string()
            } else {
                r.hidden_class_ids
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.image, r.mask, r.hidden_mask, r.class_id, hidden, r.hidden_instances, r.hidden_pixels
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Dataset {
            path: path.to_path_buf(),
            message: format!("line {line}: {msg}"),
        };
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(err(lineno, &format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(lineno, &format!("bad integer {s:?}")))
            };
            let hidden_class_ids = if f[4] == "-" {
                Vec::new()
            } else {
                f[4].split(',').map(num).collect::<Result<Vec<_>>>()?
            };
            records.push(ManifestRecord {
                image: f[0].to_string(),
                mask: f[1].to_string(),
                hidden_mask: f[2].to_string(),
                class_id: num(f[3])?,
                hidden_class_ids,
                hidden_instances: num(f[5])?,
                hidden_pixels: num(f[6])?,
            });
        }
        Ok(Self { records })
    }
}

/// Writes scenes as P6/P5 files plus a manifest into `dir`.
pub fn export_split(dir: &Path, scenes: &[Scene]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:05}");
        let rec = ManifestRecord {
            image: format!("{stem}.ppm"),
            mask: format!("{stem}_mask.pgm"),
            hidden_mask: format!("{stem}_hidden.pgm"),
            class_id: s.class_id,
            hidden_class_ids: s.hidden_classes.clone(),
            hidden_instances: s.hidden_classes.len(),
            hidden_pixels: s.hidden_mask.count(),
        };
        pnm::write_ppm(&dir.join(&rec.image), &s.image)?;
        pnm::write_pgm(&dir.join(&rec.mask), &s.mask)?;
        pnm::write_pgm(&dir.join(&rec.hidden_mask), &s.hidden_mask)?;
        manifest.records.push(rec);
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Scenes grouped by labeled class.
#[derive(Clone, Debug, Default)]
pub struct ScenePool {
    by_class: BTreeMap<usize, Vec<Scene>>,
}

impl ScenePool {
    pub fn push(&mut self, scene: Scene) {
        self.by_class.entry(scene.class_id).or_default().push(scene);
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scenes(&self, class_id: usize) -> &[Scene] {
        self.by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Draws `n` distinct scenes of `class_id`.
    pub fn sample<R: Rng + ?Sized>(&self, class_id: usize, n: usize, rng: &mut R) -> Result<Vec<Scene>> {
        let scenes = self.scenes(class_id);
        if scenes.len() < n {
            return Err(Error::config(format!(
                "class {class_id} has {} scenes, episode needs {n}",
                scenes.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, scenes.len(), n)
            .into_iter()
            .map(|i| scenes[i].clone())
            .collect())
    }
}

fn resolve(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// Reads a directory written by [`export_split`].
pub fn load_split(dir: &Path) -> Result<ScenePool> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::parse(&text, &path)?;
    let mut pool = ScenePool::default();
    for r in manifest.records {
        let image = pnm::read_ppm(&resolve(dir, &r.image))?;
        let mask = pnm::read_pgm(&resolve(dir, &r.mask))?;
        let hidden_mask = pnm::read_pgm(&resolve(dir, &r.hidden_mask))?;
        if !mask.any() {
            return Err(Error::Dataset {
                path: resolve(dir, &r.mask),
                message: "labeled mask is empty".into(),
            });
        }
        pool.push(Scene {
            image,
            class_id: r.class_id,
            mask,
            hidden_mask,
            hidden_classes: r.hidden_class_ids,
        });
    }
    Ok(pool)
}
