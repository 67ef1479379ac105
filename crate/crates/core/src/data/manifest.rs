use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Density, Group, Patch, PatchLabel, Split, Splits};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,group,density,cell_area_ratio,til_count,split";
/// Comment line written above the header; readers skip lines starting with `#`.
pub const MANIFEST_PREAMBLE: &str = "# tiles resized to 1024x1024 with a bilinear kernel; 128x128 patches";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split ratios {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Per-group counts for `n` patches. Test takes the rounding remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = (n as f64 * self.train).floor() as usize;
        let val = ((n as f64 * self.val).floor() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: PatchLabel,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split, group: Group) -> usize {
        self.in_split(split).filter(|e| e.label.group == group).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_PREAMBLE}\n{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{}\n",
                e.path, e.label.group, e.label.density, e.label.cell_area_ratio, e.label.til_count, e.split
            ));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.starts_with('#'));
        match lines.next().map(|(_, h)| h) {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            other => return Err(Error::format(origin, format!("expected header {MANIFEST_HEADER:?}, got {other:?}"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: String| Error::format(origin, format!("line {}: {why}", i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns, got {}", cols.len())));
            }
            let group: Group = cols[1].parse().map_err(|e: Error| bad(e.to_string()))?;
            let density: Density = cols[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            let ratio: f64 = cols[3].parse().map_err(|_| bad(format!("bad ratio {:?}", cols[3])))?;
            let til_count: u32 = cols[4].parse().map_err(|_| bad(format!("bad count {:?}", cols[4])))?;
            let split: Split = cols[5].parse().map_err(|e: Error| bad(e.to_string()))?;
            if (group == Group::Background) != (density == Density::NotApplicable) {
                return Err(bad(format!("density {density} is inconsistent with group {group}")));
            }
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                label: PatchLabel { group, cell_area_ratio: ratio, til_count, density },
                split,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Balances CELLS and BACKGROUND 1:1 and splits both groups with the same
/// per-split counts. The surplus of the larger group is dropped after a
/// seeded shuffle. Returns the manifest and, per split, indices into
/// `patches`.
pub fn split_balanced(patches: &[Patch], ratios: SplitRatios, seed: u64) -> Result<(DatasetManifest, Splits<Vec<usize>>)> {
    ratios.validate()?;
    let mut cells = Vec::new();
    let mut bg = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        match p.group() {
            Some(Group::Cells) => cells.push(i),
            Some(Group::Background) => bg.push(i),
            None => return Err(Error::InvalidInput(format!("patch {} is unlabeled", p.id()))),
        }
    }
    if cells.is_empty() || bg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need both groups to balance; got {} CELLS and {} BACKGROUND",
            cells.len(),
            bg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    bg.shuffle(&mut rng);
    let n = cells.len().min(bg.len());
    let [n_train, n_val, _] = ratios.counts(n);

    let mut manifest = DatasetManifest::default();
    let mut idx = Splits::<Vec<usize>>::default();
    for group in [&cells, &bg] {
        for (rank, &i) in group[..n].iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            idx.get_mut(split).push(i);
            manifest.entries.push(ManifestEntry {
                path: patches[i].relative_path(),
                label: patches[i].label.expect("checked above"),
                split,
            });
        }
    }
    Ok((manifest, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::label_from_stats;
    use image::RgbImage;

    fn patches(n_cells: usize, n_bg: usize) -> Vec<Patch> {
        (0..n_cells + n_bg)
            .map(|i| Patch {
                pixels: RgbImage::new(1, 1),
                tile_id: format!("t{i}"),
                grid_position: (0, 0),
                label: Some(label_from_stats(if i < n_cells { 0.3 } else { 0.0 }, (i % 7) as u32)),
            })
            .collect()
    }

    #[test]
    fn surplus_background_is_discarded() {
        let ps = patches(10, 14);
        let (m, idx) = split_balanced(&ps, SplitRatios::default(), 3).unwrap();
        assert_eq!(m.entries.len(), 20);
        for (split, want) in [(Split::Train, 6), (Split::Val, 2), (Split::Test, 2)] {
            assert_eq!(m.count(split, Group::Cells), want);
            assert_eq!(m.count(split, Group::Background), want);
            assert_eq!(idx.get(split).len(), 2 * want);
        }
        let (again, _) = split_balanced(&ps, SplitRatios::default(), 3).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn missing_group_or_bad_ratios_rejected() {
        assert!(split_balanced(&patches(5, 0), SplitRatios::default(), 0).is_err());
        let bad = SplitRatios { train: 0.7, val: 0.2, test: 0.2 };
        assert!(split_balanced(&patches(5, 5), bad, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let (m, _) = split_balanced(&patches(4, 4), SplitRatios::default(), 1).unwrap();
        let text = m.to_text();
        assert!(text.starts_with(MANIFEST_PREAMBLE));
        let back = DatasetManifest::parse(&text, Path::new("m.csv")).unwrap();
        assert_eq!(back.entries.len(), m.entries.len());
        for (a, b) in back.entries.iter().zip(&m.entries) {
            assert_eq!((&a.path, a.split, a.label.group, a.label.density), (&b.path, b.split, b.label.group, b.label.density));
            assert!((a.label.cell_area_ratio - b.label.cell_area_ratio).abs() < 1e-6);
        }
    }

    #[test]
    fn parse_rejects_inconsistent_rows() {
        let text = format!("{MANIFEST_HEADER}\npatches/a.png,BACKGROUND,HIGH,0.01,0,train\n");
        assert!(DatasetManifest::parse(&text, Path::new("m")).is_err());
        assert!(DatasetManifest::parse("nope\n", Path::new("m")).is_err());
    }
}
