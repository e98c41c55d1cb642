//! Synthetic ultrasound-like phantoms: a bright-rimmed, dark-cored ellipsoid
//! (the "femoral head") embedded in a textured background under
//! multiplicative Rayleigh speckle, plus dataset generation and manifest IO.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::volume::{write_svol, Volume};

/// Mean intensity inside the ellipsoid (hypoechoic core).
pub const INTERIOR_LEVEL: f32 = 0.15;
/// Mean intensity of the untextured background.
pub const BACKGROUND_LEVEL: f32 = 0.35;

#[derive(Clone, Debug)]
pub struct PhantomParams {
    /// Uniform range for each ellipsoid semi-axis, in voxels.
    pub radius_range: (f32, f32),
    /// Mean intensity of the 1-voxel bright shell around the core.
    pub rim_brightness: f32,
    /// 0 disables speckle; 1 is fully Rayleigh-distributed gain.
    pub speckle_scale: f32,
    /// Amplitude of the smooth background texture field.
    pub background_texture: f32,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            radius_range: (4.0, 9.0),
            rim_brightness: 0.85,
            speckle_scale: 0.8,
            background_texture: 0.15,
        }
    }
}

/// Image volume, voxel labels and the per-slice tight boxes derived from
/// them (`None` for slices without foreground).
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: Volume,
    pub gt_boxes: Vec<Option<BBox>>,
    pub seed: u64,
}

impl Phantom {
    /// Mirror along x; boxes are re-derived from the flipped labels.
    pub fn flip_x(&self) -> Phantom {
        let labels = self.labels.flip_x();
        Phantom {
            volume: self.volume.flip_x(),
            gt_boxes: derive_gt_boxes(&labels),
            labels,
            seed: self.seed,
        }
    }
}

/// Rayleigh draw with unit mean.
fn rayleigh_unit_mean(u: f32) -> f32 {
    let sigma = (2.0 / std::f32::consts::PI).sqrt();
    sigma * (-2.0 * (1.0 - u).max(f32::MIN_POSITIVE).ln()).sqrt()
}

pub fn gen_phantom(seed: u64, dims: (usize, usize, usize), params: &PhantomParams) -> Result<Phantom> {
    let (d, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rmin, rmax) = params.radius_range;
    if !(0.5..=rmax).contains(&rmin) {
        return Err(Error::Input(format!("bad radius range {:?}", params.radius_range)));
    }

    // sample semi-axes and a center that keeps the ellipsoid one voxel
    // inside the volume; resample on failure
    let mut placed = None;
    for _ in 0..100 {
        let ad = rng.random_range(rmin..=rmax);
        let ay = rng.random_range(rmin..=rmax);
        let ax = rng.random_range(rmin..=rmax);
        let fits = |extent: usize, a: f32| extent as f32 - a - 1.0 >= a + 1.0;
        if !(fits(d, ad) && fits(h, ay) && fits(w, ax)) {
            continue;
        }
        let cz = rng.random_range(ad + 1.0..=d as f32 - ad - 1.0);
        let cy = rng.random_range(ay + 1.0..=h as f32 - ay - 1.0);
        let cx = rng.random_range(ax + 1.0..=w as f32 - ax - 1.0);
        placed = Some(([cz, cy, cx], [ad, ay, ax]));
        break;
    }
    let Some(([cz, cy, cx], [ad, ay, ax])) = placed else {
        return Err(Error::Input(format!(
            "ellipsoid with semi-axes in {:?} cannot fit in {d}x{h}x{w} after 100 attempts",
            params.radius_range
        )));
    };

    // voxel-center membership test
    let mut labels = Volume::zeros(d, h, w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = (z as f32 + 0.5 - cz) / ad;
                let dy = (y as f32 + 0.5 - cy) / ay;
                let dx = (x as f32 + 0.5 - cx) / ax;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    labels.set(z, y, x, 1.0);
                }
            }
        }
    }

    // rim: foreground voxels with a non-foreground 6-neighbor
    let is_fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && labels.at(z as usize, y as usize, x as usize) > 0.5
    };
    let mut rim = vec![false; d * h * w];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !is_fg(z, y, x) {
                    continue;
                }
                let edge = !(is_fg(z - 1, y, x)
                    && is_fg(z + 1, y, x)
                    && is_fg(z, y - 1, x)
                    && is_fg(z, y + 1, x)
                    && is_fg(z, y, x - 1)
                    && is_fg(z, y, x + 1));
                if edge {
                    rim[((z as usize) * h + y as usize) * w + x as usize] = true;
                }
            }
        }
    }

    // smooth background texture: a few random low-frequency cosines
    let n_waves = 4;
    let waves: Vec<([f32; 3], f32)> = (0..n_waves)
        .map(|_| {
            let f = [
                rng.random_range(0.02..0.08f32),
                rng.random_range(0.02..0.08f32),
                rng.random_range(0.02..0.08f32),
            ];
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            (f, phase)
        })
        .collect();

    let mut volume = Volume::zeros(d, h, w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let base = if rim[idx] {
                    params.rim_brightness
                } else if labels.data[idx] > 0.5 {
                    INTERIOR_LEVEL
                } else {
                    let mut tex = 0.0f32;
                    for (f, phase) in &waves {
                        tex += (std::f32::consts::TAU * (f[0] * z as f32 + f[1] * y as f32 + f[2] * x as f32)
                            + phase)
                            .cos();
                    }
                    BACKGROUND_LEVEL + params.background_texture * tex / n_waves as f32
                };
                let gain = if params.speckle_scale > 0.0 {
                    let r = rayleigh_unit_mean(rng.random_range(0.0..1.0f32));
                    (1.0 - params.speckle_scale) + params.speckle_scale * r
                } else {
                    1.0
                };
                volume.data[idx] = (base * gain).clamp(0.0, 1.0);
            }
        }
    }

    let gt_boxes = derive_gt_boxes(&labels);
    Ok(Phantom { volume, labels, gt_boxes, seed })
}

/// Per-slice tight bounding box of the foreground, in half-open pixel
/// coordinates; a single voxel at (y, x) yields the unit box at (x, y).
pub fn derive_gt_boxes(labels: &Volume) -> Vec<Option<BBox>> {
    let (d, h, w) = labels.dims();
    let mut out = Vec::with_capacity(d);
    for z in 0..d {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if labels.at(z, y, x) > 0.5 {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        out.push(if any {
            Some(BBox::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32))
        } else {
            None
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub split: Split,
    /// Paths relative to the manifest file's directory.
    pub volume: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// One `<split>\t<volume-path>\t<label-path>` line per phantom.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.split, e.volume.display(), e.label.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let split = match parts[0] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Format(format!(
                        "manifest line {}: unknown split '{other}'",
                        lineno + 1
                    )))
                }
            };
            entries.push(ManifestEntry {
                split,
                volume: PathBuf::from(parts[1]),
                label: PathBuf::from(parts[2]),
            });
        }
        Ok(Manifest { entries })
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    Manifest::parse(&text)
}

/// Load the image and label volumes of a manifest entry, resolving its
/// relative paths against the manifest's directory.
pub fn load_entry(manifest_path: &Path, entry: &ManifestEntry) -> Result<(Volume, Volume)> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let vol = crate::volume::read_svol(&dir.join(&entry.volume))?;
    let lab = crate::volume::read_svol(&dir.join(&entry.label))?;
    if vol.dims() != lab.dims() {
        return Err(Error::Dim(format!(
            "volume dims {:?} != label dims {:?} for {}",
            vol.dims(),
            lab.dims(),
            entry.volume.display()
        )));
    }
    Ok((vol, lab))
}

/// Generate `n_train + n_test` phantoms with disjoint per-phantom seeds,
/// x-mirror every second training phantom, write SVOL files plus a manifest
/// into `out_dir`, and return the manifest (paths relative to `out_dir`).
pub fn make_dataset(
    out_dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    dims: (usize, usize, usize),
    params: &PhantomParams,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut used = std::collections::HashSet::new();
    let mut next_seed = move || loop {
        let s: u64 = rng.random();
        if used.insert(s) {
            return s;
        }
    };

    let mut entries = Vec::new();
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let idx = if i < n_train { i } else { i - n_train };
        let mut phantom = gen_phantom(next_seed(), dims, params)?;
        if split == Split::Train && idx % 2 == 1 {
            phantom = phantom.flip_x();
        }
        let stem = format!("{split}_{idx:03}");
        let vol_name = PathBuf::from(format!("{stem}_volume.svol"));
        let lab_name = PathBuf::from(format!("{stem}_labels.svol"));
        write_svol(&out_dir.join(&vol_name), &phantom.volume)?;
        write_svol(&out_dir.join(&lab_name), &phantom.labels)?;
        entries.push(ManifestEntry { split, volume: vol_name, label: lab_name });
    }
    let manifest = Manifest { entries };
    write_manifest(&out_dir.join("manifest.tsv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_dims() -> (usize, usize, usize) {
        (32, 48, 32)
    }

    #[test]
    fn noise_free_phantom_has_dark_core_and_bright_rim() {
        let params = PhantomParams { speckle_scale: 0.0, ..Default::default() };
        let p = gen_phantom(11, default_dims(), &params).unwrap();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for z in 0..32 {
            for y in 0..48 {
                for x in 0..32 {
                    if p.labels.at(z, y, x) > 0.5 {
                        let v = p.volume.at(z, y, x);
                        if v > 0.5 {
                            boundary.push(v);
                        } else {
                            interior.push(v);
                        }
                    }
                }
            }
        }
        assert!(!interior.is_empty() && !boundary.is_empty());
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!(mean(&interior) < mean(&boundary));
        assert!((mean(&interior) - INTERIOR_LEVEL).abs() < 1e-5);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = PhantomParams::default();
        let a = gen_phantom(99, default_dims(), &params).unwrap();
        let b = gen_phantom(99, default_dims(), &params).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.gt_boxes, b.gt_boxes);
    }

    #[test]
    fn impossible_fit_errors_after_retries() {
        let params = PhantomParams { radius_range: (6.0, 9.0), ..Default::default() };
        assert!(matches!(gen_phantom(1, (8, 8, 8), &params), Err(Error::Input(_))));
    }

    /// Foreground is one 6-connected component.
    fn single_component(labels: &Volume) -> bool {
        let (d, h, w) = labels.dims();
        let total = labels.foreground_count();
        if total == 0 {
            return false;
        }
        let start = labels.data.iter().position(|&v| v > 0.5).unwrap();
        let mut seen = vec![false; d * h * w];
        let mut stack = vec![start];
        seen[start] = true;
        let mut visited = 0usize;
        while let Some(idx) = stack.pop() {
            visited += 1;
            let z = idx / (h * w);
            let y = (idx / w) % h;
            let x = idx % w;
            let mut push = |zz: isize, yy: isize, xx: isize| {
                if zz >= 0 && yy >= 0 && xx >= 0 && (zz as usize) < d && (yy as usize) < h && (xx as usize) < w {
                    let j = ((zz as usize) * h + yy as usize) * w + xx as usize;
                    if !seen[j] && labels.data[j] > 0.5 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            };
            push(z as isize - 1, y as isize, x as isize);
            push(z as isize + 1, y as isize, x as isize);
            push(z as isize, y as isize - 1, x as isize);
            push(z as isize, y as isize + 1, x as isize);
            push(z as isize, y as isize, x as isize - 1);
            push(z as isize, y as isize, x as isize + 1);
        }
        visited == total
    }

    #[test]
    fn phantom_invariants_hold_over_100_seeds() {
        let params = PhantomParams::default();
        let mut fractions = Vec::new();
        for seed in 0..100u64 {
            let p = gen_phantom(seed, default_dims(), &params).unwrap();
            assert!(p.volume.data.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)), "seed {seed}");
            assert!(p.labels.data.iter().all(|&v| v == 0.0 || v == 1.0), "seed {seed}");
            assert!(single_component(&p.labels), "seed {seed}");
            // every gt box is the minimal box containing its slice's foreground
            for (z, gt) in p.gt_boxes.iter().enumerate() {
                let slice_fg: Vec<(usize, usize)> = (0..48)
                    .flat_map(|y| (0..32).map(move |x| (y, x)))
                    .filter(|&(y, x)| p.labels.at(z, y, x) > 0.5)
                    .collect();
                match gt {
                    None => assert!(slice_fg.is_empty()),
                    Some(b) => {
                        assert!(!slice_fg.is_empty());
                        // contains all foreground pixels...
                        assert!(slice_fg.iter().all(|&(y, x)| b.contains_pixel(y, x)));
                        // ...and is minimal: every edge touches a foreground pixel
                        let xs: Vec<usize> = slice_fg.iter().map(|&(_, x)| x).collect();
                        let ys: Vec<usize> = slice_fg.iter().map(|&(y, _)| y).collect();
                        assert_eq!(b.x1, *xs.iter().min().unwrap() as f32);
                        assert_eq!(b.x2, (*xs.iter().max().unwrap() + 1) as f32);
                        assert_eq!(b.y1, *ys.iter().min().unwrap() as f32);
                        assert_eq!(b.y2, (*ys.iter().max().unwrap() + 1) as f32);
                    }
                }
            }
            fractions.push(p.labels.foreground_count() as f64 / p.labels.numel() as f64);
        }
        // regression bounds measured once over seeds 0..100 at defaults
        let (lo, hi) = fractions.iter().fold((1.0f64, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
        assert!(lo >= 0.005, "min label fraction {lo}");
        assert!(hi <= 0.15, "max label fraction {hi}");
    }

    #[test]
    fn derive_gt_boxes_examples() {
        let mut labels = Volume::zeros(3, 8, 8);
        assert!(derive_gt_boxes(&labels).iter().all(|b| b.is_none()));

        labels.set(1, 3, 5, 1.0);
        let boxes = derive_gt_boxes(&labels);
        assert_eq!(boxes[0], None);
        assert_eq!(boxes[1], Some(BBox::new(5.0, 3.0, 6.0, 4.0)));
        assert_eq!(boxes[2], None);
    }

    #[test]
    fn derive_gt_boxes_matches_exhaustive_scan() {
        let mut s = 3u64;
        let mut next = move |m: u64| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 33) % m
        };
        for _ in 0..50 {
            let mut labels = Volume::zeros(4, 10, 12);
            for _ in 0..next(30) {
                let (z, y, x) = (next(4) as usize, next(10) as usize, next(12) as usize);
                labels.set(z, y, x, 1.0);
            }
            for (z, b) in derive_gt_boxes(&labels).iter().enumerate() {
                // rasterized box must be a superset of the slice foreground
                for y in 0..10 {
                    for x in 0..12 {
                        if labels.at(z, y, x) > 0.5 {
                            assert!(b.unwrap().contains_pixel(y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn make_dataset_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        let params = PhantomParams::default();
        let m1 = make_dataset(&d1, 10, 9, 77, default_dims(), &params).unwrap();
        let m2 = make_dataset(&d2, 10, 9, 77, default_dims(), &params).unwrap();
        assert_eq!(m1.split(Split::Train).count(), 10);
        assert_eq!(m1.split(Split::Test).count(), 9);
        assert_eq!(m1.to_text(), m2.to_text());
        // same seed gives identical bytes
        for e in &m1.entries {
            let b1 = std::fs::read(d1.join(&e.volume)).unwrap();
            let b2 = std::fs::read(d2.join(&e.volume)).unwrap();
            assert_eq!(b1, b2);
        }
        // volume and label paths never collide across splits
        let mut names: Vec<String> = m1
            .entries
            .iter()
            .flat_map(|e| [e.volume.display().to_string(), e.label.display().to_string()])
            .collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 38);

        let m3 = make_dataset(&dir.path().join("c"), 10, 9, 78, default_dims(), &params).unwrap();
        let different = m1
            .entries
            .iter()
            .zip(&m3.entries)
            .any(|(a, b)| std::fs::read(d1.join(&a.volume)).unwrap() != std::fs::read(dir.path().join("c").join(&b.volume)).unwrap());
        assert!(different, "different master seed must change the data");
    }

    #[test]
    fn manifest_roundtrip_and_rejects_garbage() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                split: Split::Train,
                volume: PathBuf::from("t_000_volume.svol"),
                label: PathBuf::from("t_000_labels.svol"),
            }],
        };
        let parsed = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(parsed.entries.len(), 1);
        assert_eq!(parsed.entries[0].split, Split::Train);
        assert!(Manifest::parse("train\tonly-two-fields").is_err());
        assert!(Manifest::parse("val\ta\tb").is_err());
    }
}
