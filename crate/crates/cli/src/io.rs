//! Dataset file formats: plain-text point clouds, ground-truth index files,
//! and the comma-separated pair manifest.
//!
//! Point-cloud file: first line `N`, then `N` lines of `x y z` decimal
//! floats. Ground-truth file: `N` lines of 0-based target indices. Manifest:
//! one `source,target,gt,theta` record per line with paths relative to the
//! manifest's directory; `gt` and `theta` may be empty.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shapecorr_core::geometry::{GroundTruthMap, PointCloud};
use shapecorr_core::synth::ShapePair;

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.n() * 32);
    out.push_str(&format!("{}\n", cloud.n()));
    for p in cloud.points() {
        out.push_str(&format!("{:.6} {:.6} {:.6}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .with_context(|| format!("{}: empty file", path.display()))?;
    let n: usize = header
        .trim()
        .parse()
        .with_context(|| format!("{}:1: bad point count `{header}`", path.display()))?;
    let mut points = Vec::with_capacity(n);
    for (idx, line) in lines.take(n) {
        let mut coords = [0.0f64; 3];
        let mut fields = line.split_whitespace();
        for (a, slot) in coords.iter_mut().enumerate() {
            let field = fields.next().with_context(|| {
                format!("{}:{}: expected 3 coordinates, got {a}", path.display(), idx + 1)
            })?;
            *slot = field.parse().with_context(|| {
                format!("{}:{}: bad coordinate `{field}`", path.display(), idx + 1)
            })?;
        }
        if fields.next().is_some() {
            bail!("{}:{}: trailing fields after z", path.display(), idx + 1);
        }
        points.push(coords);
    }
    if points.len() != n {
        bail!(
            "{}: header says {n} points, file has {}",
            path.display(),
            points.len()
        );
    }
    PointCloud::from_points(points).with_context(|| format!("{}: invalid cloud", path.display()))
}

pub fn write_gt(path: &Path, gt: &GroundTruthMap) -> Result<()> {
    let mut out = String::with_capacity(gt.len() * 6);
    for &t in gt.as_slice() {
        out.push_str(&format!("{t}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_gt(path: &Path, n_target: usize) -> Result<GroundTruthMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut indices = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: usize = line.trim().parse().with_context(|| {
            format!("{}:{}: bad index `{line}`", path.display(), idx + 1)
        })?;
        indices.push(v);
    }
    GroundTruthMap::new(indices, n_target)
        .with_context(|| format!("{}: invalid ground truth", path.display()))
}

/// One manifest row: paths relative to the manifest directory.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: Option<PathBuf>,
    pub theta: Option<f64>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let theta = e.theta.map(|t| format!("{t}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.source.display(),
            e.target.display(),
            e.gt.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            theta
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            bail!("{}:{}: expected `source,target[,gt[,theta]]`", path.display(), idx + 1);
        }
        let theta = match fields.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some(t) => Some(t.parse().with_context(|| {
                format!("{}:{}: bad theta `{t}`", path.display(), idx + 1)
            })?),
        };
        entries.push(ManifestEntry {
            source: fields[0].trim().into(),
            target: fields[1].trim().into(),
            gt: match fields.get(2).map(|s| s.trim()) {
                None | Some("") => None,
                Some(p) => Some(p.into()),
            },
            theta,
        });
    }
    Ok(entries)
}

/// Writes a dataset directory: per-pair cloud/gt files plus `manifest.csv`.
pub fn write_dataset(pairs: &[ShapePair], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let src = PathBuf::from(format!("pair_{i:04}_src.xyz"));
        let tgt = PathBuf::from(format!("pair_{i:04}_tgt.xyz"));
        write_cloud(&dir.join(&src), &pair.source)?;
        write_cloud(&dir.join(&tgt), &pair.target)?;
        let gt = match &pair.gt {
            Some(g) => {
                let p = PathBuf::from(format!("pair_{i:04}_gt.txt"));
                write_gt(&dir.join(&p), g)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            source: src,
            target: tgt,
            gt,
            theta: pair.theta,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every pair referenced by a manifest; missing files fail with the
/// offending path.
pub fn read_dataset(manifest: &Path) -> Result<Vec<ShapePair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let source = read_cloud(&base.join(&e.source))?;
        let target = read_cloud(&base.join(&e.target))?;
        let gt = match &e.gt {
            Some(p) => Some(read_gt(&base.join(p), target.n())?),
            None => None,
        };
        pairs.push(ShapePair {
            source,
            target,
            gt,
            theta: e.theta,
        });
    }
    Ok(pairs)
}

/// Mapping output: one 0-based target index per line.
pub fn write_mapping(path: &Path, mapping: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(mapping.len() * 6);
    for &m in mapping {
        out.push_str(&format!("{m}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapecorr_core::synth::{generate_dataset, DatasetConfig};

    #[test]
    fn cloud_roundtrip_within_text_precision() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_dataset(&DatasetConfig {
            pairs: 1,
            points: 64,
            ..Default::default()
        })
        .unwrap();
        let path = dir.path().join("c.xyz");
        write_cloud(&path, &pairs[0].source).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(back.n(), 64);
        for i in 0..64 {
            for a in 0..3 {
                assert!((back.point(i)[a] - pairs[0].source.point(i)[a]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn malformed_coordinate_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "2\n0 0 0\n1 nope 0\n").unwrap();
        let err = format!("{:#}", read_cloud(&path).unwrap_err());
        assert!(err.contains(":3"), "error should carry the line number: {err}");
    }

    #[test]
    fn dataset_roundtrip_and_manifest_count() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_dataset(&DatasetConfig {
            pairs: 3,
            points: 48,
            rotation_labels: true,
            same_shape: true,
            ..Default::default()
        })
        .unwrap();
        let manifest = write_dataset(&pairs, dir.path()).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.gt, b.gt);
            assert!((a.theta.unwrap() - b.theta.unwrap()).abs() < 1e-12);
            for i in 0..a.source.n() {
                for c in 0..3 {
                    assert!((a.source.point(i)[c] - b.source.point(i)[c]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn missing_file_errors_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        fs::write(&manifest, "gone_src.xyz,gone_tgt.xyz,,\n").unwrap();
        let err = format!("{:#}", read_dataset(&manifest).unwrap_err());
        assert!(err.contains("gone_src.xyz"), "{err}");
    }
}
