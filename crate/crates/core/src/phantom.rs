//! Synthetic phantom cases: CT-like slice, PTV mask, OARs mask, and an
//! analytic ground-truth dose.
//!
//! Every case is a pure function of `(spec.seed, index)`, so datasets can be
//! regenerated bit-identically. The dose model is
//!
//! ```text
//! dose(v) = clamp(1 − c · dist(v, PTV), 0, 1) · body(v) · (1 − s · oars(v))
//! ```
//!
//! with the prescription normalized to 1.0 inside the PTV and `dist` the
//! Euclidean distance (in pixels) to the nearest PTV pixel.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_RETRIES: usize = 100;

/// One subject: all planes are 1×H×W, masks hold exactly 0.0 or 1.0.
#[derive(Debug, Clone)]
pub struct Case {
    pub ct: Tensor,
    pub ptv: Tensor,
    pub oars: Tensor,
    pub dose: Tensor,
    pub id: String,
}

impl Case {
    pub fn height(&self) -> usize {
        self.ct.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ct.shape()[2]
    }

    /// Network input: CT, PTV mask, OARs mask stacked as 3×H×W.
    pub fn input(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.ct.numel());
        data.extend_from_slice(self.ct.data());
        data.extend_from_slice(self.ptv.data());
        data.extend_from_slice(self.oars.data());
        Tensor::new(&[3, self.height(), self.width()], data).unwrap()
    }

    /// Check the storable invariants: plane shapes agree, masks are binary,
    /// PTV is nonempty and disjoint from the OARs, dose lies in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let shape = self.ct.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Contract(format!("case {}: ct is not 1×H×W", self.id)));
        }
        for (name, t) in [("ptv", &self.ptv), ("oars", &self.oars), ("dose", &self.dose)] {
            if t.shape() != shape {
                return Err(Error::Contract(format!(
                    "case {}: {name} shape {:?} differs from ct {:?}",
                    self.id,
                    t.shape(),
                    shape
                )));
            }
        }
        let mut ptv_pixels = 0usize;
        for i in 0..self.ptv.numel() {
            let (p, o) = (self.ptv.data()[i], self.oars.data()[i]);
            if p != 0.0 && p != 1.0 {
                return Err(Error::Contract(format!("case {}: ptv not binary", self.id)));
            }
            if o != 0.0 && o != 1.0 {
                return Err(Error::Contract(format!("case {}: oars not binary", self.id)));
            }
            if p == 1.0 && o == 1.0 {
                return Err(Error::Contract(format!(
                    "case {}: ptv and oars overlap at {i}",
                    self.id
                )));
            }
            ptv_pixels += (p == 1.0) as usize;
            let d = self.dose.data()[i];
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Contract(format!(
                    "case {}: dose {d} outside [0,1] at {i}",
                    self.id
                )));
            }
        }
        if ptv_pixels == 0 {
            return Err(Error::Contract(format!("case {}: empty PTV", self.id)));
        }
        Ok(())
    }
}

/// Uniform prior over a closed float interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior(pub f64, pub f64);

impl Prior {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..self.1)
        }
    }
}

/// Geometry priors for one domain. Lengths are fractions of min(H, W);
/// positions are fractions of the respective axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub ptv_center_y: Prior,
    pub ptv_center_x: Prior,
    pub ptv_radius: Prior,
    pub oar_count_min: usize,
    pub oar_count_max: usize,
    pub oar_radius: Prior,
    /// Dose falloff coefficient, in units of 1/min(H, W).
    pub falloff: Prior,
    /// OAR sparing dip s.
    pub spare: Prior,
}

impl DomainSpec {
    /// The data-rich domain: larger, higher-seated targets.
    pub fn source_like(height: usize, width: usize, seed: u64) -> Self {
        DomainSpec {
            name: "source-like".into(),
            height,
            width,
            seed,
            ptv_center_y: Prior(0.34, 0.50),
            ptv_center_x: Prior(0.40, 0.60),
            ptv_radius: Prior(0.14, 0.20),
            oar_count_min: 2,
            oar_count_max: 3,
            oar_radius: Prior(0.08, 0.12),
            falloff: Prior(1.1, 1.6),
            spare: Prior(0.1, 0.3),
        }
    }

    /// The data-poor domain: smaller, lower-seated targets with a steeper
    /// falloff. Same scanning area, different anatomy priors.
    pub fn target_like(height: usize, width: usize, seed: u64) -> Self {
        DomainSpec {
            name: "target-like".into(),
            height,
            width,
            seed,
            ptv_center_y: Prior(0.50, 0.66),
            ptv_center_x: Prior(0.35, 0.55),
            ptv_radius: Prior(0.10, 0.15),
            oar_count_min: 2,
            oar_count_max: 2,
            oar_radius: Prior(0.07, 0.11),
            falloff: Prior(1.4, 2.0),
            spare: Prior(0.1, 0.3),
        }
    }

    pub fn by_name(name: &str, height: usize, width: usize, seed: u64) -> Result<Self> {
        match name {
            "source-like" => Ok(Self::source_like(height, width, seed)),
            "target-like" => Ok(Self::target_like(height, width, seed)),
            other => Err(Error::Config(format!(
                "unknown domain spec '{other}' (expected source-like or target-like)"
            ))),
        }
    }

    /// Stable hash of every field; identical specs produce identical
    /// fingerprints across runs.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "{}|{}x{}|seed={}|pcy={:?}|pcx={:?}|pr={:?}|oc={}..{}|or={:?}|c={:?}|s={:?}",
            self.name,
            self.height,
            self.width,
            self.seed,
            self.ptv_center_y,
            self.ptv_center_x,
            self.ptv_radius,
            self.oar_count_min,
            self.oar_count_max,
            self.oar_radius,
            self.falloff,
            self.spare
        );
        format!("{:016x}", fnv1a(canon.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                mask[y * w + x] = self.contains(y, x);
            }
        }
        mask
    }
}

/// Deterministically generate case `index` of a domain.
pub fn generate_case(spec: &DomainSpec, index: usize) -> Result<Case> {
    generate_case_with_body(spec, index).map(|(case, _)| case)
}

/// Like [`generate_case`] but also returns the body mask, which is not part
/// of the stored case.
pub fn generate_case_with_body(spec: &DomainSpec, index: usize) -> Result<(Case, Tensor)> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::Contract("generate_case: empty image".into()));
    }
    let unit = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15),
    );

    // Body: a large ellipse roughly centered on the slice.
    let body_ellipse = Ellipse {
        cy: h as f64 * 0.5 + rng.gen_range(-0.02..0.02) * h as f64,
        cx: w as f64 * 0.5 + rng.gen_range(-0.02..0.02) * w as f64,
        ry: h as f64 * rng.gen_range(0.40..0.46),
        rx: w as f64 * rng.gen_range(0.42..0.48),
    };
    let body = body_ellipse.rasterize(h, w);

    // PTV: inside the body, nonempty.
    let mut ptv: Option<Vec<bool>> = None;
    for _ in 0..PLACEMENT_RETRIES {
        let r = spec.ptv_radius.sample(&mut rng) * unit;
        let e = Ellipse {
            cy: spec.ptv_center_y.sample(&mut rng) * h as f64,
            cx: spec.ptv_center_x.sample(&mut rng) * w as f64,
            ry: r * rng.gen_range(0.85..1.15),
            rx: r * rng.gen_range(0.85..1.15),
        };
        let mask = e.rasterize(h, w);
        let nonempty = mask.iter().any(|&m| m);
        let inside_body = mask.iter().zip(&body).all(|(&m, &b)| !m || b);
        if nonempty && inside_body {
            ptv = Some(mask);
            break;
        }
    }
    let ptv = ptv.ok_or_else(|| {
        Error::Generation(format!(
            "case {index}: could not place PTV inside the body after {PLACEMENT_RETRIES} retries"
        ))
    })?;

    // OARs: each inside the body and disjoint from the PTV.
    let oar_count = if spec.oar_count_min == spec.oar_count_max {
        spec.oar_count_min
    } else {
        rng.gen_range(spec.oar_count_min..=spec.oar_count_max)
    };
    let mut oars = vec![false; h * w];
    for k in 0..oar_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let r = spec.oar_radius.sample(&mut rng) * unit;
            let e = Ellipse {
                cy: rng.gen_range(0.2..0.8) * h as f64,
                cx: rng.gen_range(0.2..0.8) * w as f64,
                ry: r * rng.gen_range(0.8..1.2),
                rx: r * rng.gen_range(0.8..1.2),
            };
            let mask = e.rasterize(h, w);
            let nonempty = mask.iter().any(|&m| m);
            let inside_body = mask.iter().zip(&body).all(|(&m, &b)| !m || b);
            let disjoint = mask.iter().zip(&ptv).all(|(&m, &p)| !(m && p));
            if nonempty && inside_body && disjoint {
                for (o, &m) in oars.iter_mut().zip(&mask) {
                    *o |= m;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "case {index}: could not place OAR {k} disjoint from the PTV after {PLACEMENT_RETRIES} retries"
            )));
        }
    }

    let falloff = spec.falloff.sample(&mut rng) / unit;
    let spare = spec.spare.sample(&mut rng);

    // Exact Euclidean distance to the nearest PTV pixel.
    let ptv_pixels: Vec<(f64, f64)> = (0..h * w)
        .filter(|&i| ptv[i])
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let mut dose = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !body[i] {
                continue;
            }
            let dist = if ptv[i] {
                0.0
            } else {
                ptv_pixels
                    .iter()
                    .map(|&(py, px)| {
                        let (dy, dx) = (py - y as f64, px - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            };
            let base = (1.0 - falloff * dist).clamp(0.0, 1.0);
            let dip = if oars[i] { 1.0 - spare } else { 1.0 };
            dose[i] = base * dip;
        }
    }

    // CT: noisy tissue inside the body over a faint noise background.
    let mut ct = vec![0.0; h * w];
    for (i, v) in ct.iter_mut().enumerate() {
        *v = if body[i] {
            (0.35 + rng.gen_range(0.0..0.15f64)).clamp(0.0, 1.0)
        } else {
            rng.gen_range(0.0..0.05)
        };
    }

    let as_plane = |data: Vec<f64>| Tensor::new(&[1, h, w], data);
    let to_f64 = |mask: &[bool]| mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let case = Case {
        ct: as_plane(ct)?,
        ptv: as_plane(to_f64(&ptv))?,
        oars: as_plane(to_f64(&oars))?,
        dose: as_plane(dose)?,
        id: format!("case_{index:04}"),
    };
    case.validate()?;
    Ok((case, as_plane(to_f64(&body))?))
}

/// One manifest row (paths are relative to the dataset directory).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub domain: String,
    pub seed_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub path: PathBuf,
}

impl Manifest {
    pub fn fingerprint(&self) -> Option<&str> {
        self.rows.first().map(|r| r.seed_fingerprint.as_str())
    }
}

/// Generate `n` cases under `out_dir` (one directory per case, four PFMT
/// files each) and write `manifest.csv`.
pub fn generate_dataset(spec: &DomainSpec, n: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Contract("generate_dataset: n must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let fp = spec.fingerprint();
    let mut rows = Vec::with_capacity(n);
    for index in 0..n {
        let case = generate_case(spec, index)?;
        let case_dir = out_dir.join(&case.id);
        fs::create_dir_all(&case_dir)?;
        write_tensor(case_dir.join("ct.pfmt"), &case.ct)?;
        write_tensor(case_dir.join("ptv.pfmt"), &case.ptv)?;
        write_tensor(case_dir.join("oars.pfmt"), &case.oars)?;
        write_tensor(case_dir.join("dose.pfmt"), &case.dose)?;
        rows.push(ManifestRow {
            path: case.id.clone(),
            id: case.id,
            domain: spec.name.clone(),
            seed_fingerprint: fp.clone(),
        });
    }
    let manifest_path = out_dir.join("manifest.csv");
    let mut file = fs::File::create(&manifest_path)?;
    writeln!(file, "id,path,domain,seed_fingerprint")?;
    for r in &rows {
        writeln!(file, "{},{},{},{}", r.id, r.path, r.domain, r.seed_fingerprint)?;
    }
    Ok(Manifest {
        rows,
        path: manifest_path,
    })
}

pub fn read_manifest(dataset_dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dataset_dir.as_ref().join("manifest.csv");
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,path,domain,seed_fingerprint") => {}
        other => {
            return Err(Error::Config(format!(
                "manifest {path:?}: unexpected header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "manifest {path:?}: line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            path: fields[1].to_string(),
            domain: fields[2].to_string(),
            seed_fingerprint: fields[3].to_string(),
        });
    }
    Ok(Manifest { rows, path })
}

/// An in-memory dataset of cases.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn from_cases(cases: Vec<Case>) -> Self {
        Dataset { cases }
    }

    /// Load every case listed in a dataset directory's manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut cases = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let case_dir = dir.join(&row.path);
            let case = Case {
                ct: read_tensor(case_dir.join("ct.pfmt"))?,
                ptv: read_tensor(case_dir.join("ptv.pfmt"))?,
                oars: read_tensor(case_dir.join("oars.pfmt"))?,
                dose: read_tensor(case_dir.join("dose.pfmt"))?,
                id: row.id.clone(),
            };
            case.validate()?;
            cases.push(case);
        }
        Ok(Dataset { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Generate an in-memory dataset without touching the filesystem.
    pub fn synthesize(spec: &DomainSpec, n: usize) -> Result<Self> {
        let cases = (0..n)
            .map(|i| generate_case(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_invariants_hold_across_both_specs() {
        for spec in [
            DomainSpec::source_like(32, 32, 7),
            DomainSpec::target_like(32, 32, 8),
        ] {
            for i in 0..200 {
                let case = generate_case(&spec, i).unwrap();
                case.validate().unwrap();
            }
        }
    }

    #[test]
    fn dose_is_one_on_ptv_and_zero_outside_body() {
        let spec = DomainSpec::source_like(32, 32, 3);
        for i in 0..20 {
            let (case, body) = generate_case_with_body(&spec, i).unwrap();
            for j in 0..case.dose.numel() {
                if case.ptv.data()[j] == 1.0 {
                    assert_eq!(case.dose.data()[j], 1.0, "case {i} pixel {j}");
                }
                if body.data()[j] == 0.0 {
                    assert_eq!(case.dose.data()[j], 0.0, "case {i} pixel {j}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_index() {
        let spec = DomainSpec::target_like(32, 32, 42);
        let a = generate_case(&spec, 5).unwrap();
        let b = generate_case(&spec, 5).unwrap();
        assert_eq!(a.ct.data(), b.ct.data());
        assert_eq!(a.ptv.data(), b.ptv.data());
        assert_eq!(a.oars.data(), b.oars.data());
        assert_eq!(a.dose.data(), b.dose.data());

        let c = generate_case(&spec, 6).unwrap();
        assert_ne!(a.dose.data(), c.dose.data());
    }

    #[test]
    fn falloff_is_monotone_along_oar_free_axis_rays() {
        // Walk the four axis rays from the PTV centroid, starting two pixels
        // past the PTV boundary; skip rays that cross an OAR (the sparing dip
        // breaks monotonicity there by design).
        let spec = DomainSpec::source_like(48, 48, 11);
        let mut rays_checked = 0;
        for i in 0..30 {
            let case = generate_case(&spec, i).unwrap();
            let (h, w) = (case.height(), case.width());
            let ptv = case.ptv.data();
            let (mut cy, mut cx, mut n) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if ptv[y * w + x] == 1.0 {
                        cy += y as f64;
                        cx += x as f64;
                        n += 1.0;
                    }
                }
            }
            let (cy, cx) = ((cy / n).round() as i64, (cx / n).round() as i64);
            for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                let mut samples = Vec::new();
                let mut crosses_oar = false;
                let (mut y, mut x) = (cy, cx);
                let mut outside_streak = 0;
                loop {
                    y += dy;
                    x += dx;
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        break;
                    }
                    let idx = (y as usize) * w + x as usize;
                    if ptv[idx] == 1.0 {
                        continue;
                    }
                    outside_streak += 1;
                    if outside_streak <= 2 {
                        continue; // settle past the rasterized boundary
                    }
                    if case.oars.data()[idx] == 1.0 {
                        crosses_oar = true;
                        break;
                    }
                    samples.push(case.dose.data()[idx]);
                }
                if crosses_oar || samples.len() < 3 {
                    continue;
                }
                rays_checked += 1;
                for pair in samples.windows(2) {
                    assert!(
                        pair[1] <= pair[0] + 1e-12,
                        "case {i}: dose rises from {} to {}",
                        pair[0],
                        pair[1]
                    );
                }
            }
        }
        assert!(rays_checked > 20, "only {rays_checked} usable rays");
    }

    #[test]
    fn dataset_layout_and_fingerprint_replay() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source_like(16, 16, 1);
        let m = generate_dataset(&spec, 1, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 1);
        assert!(dir.path().join("case_0000/ct.pfmt").exists());
        assert!(dir.path().join("case_0000/ptv.pfmt").exists());
        assert!(dir.path().join("case_0000/oars.pfmt").exists());
        assert!(dir.path().join("case_0000/dose.pfmt").exists());
        assert!(m.path.exists());

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&spec, 1, dir2.path()).unwrap();
        assert_eq!(m.fingerprint(), m2.fingerprint());

        let other = DomainSpec::source_like(16, 16, 2);
        let dir3 = tempfile::tempdir().unwrap();
        let m3 = generate_dataset(&other, 1, dir3.path()).unwrap();
        assert_ne!(m.fingerprint(), m3.fingerprint());
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::target_like(16, 16, 9);
        generate_dataset(&spec, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let direct = generate_case(&spec, 2).unwrap();
        assert_eq!(ds.cases[2].dose.data(), direct.dose.data());
    }

    #[test]
    fn zero_cases_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::source_like(16, 16, 0);
        assert!(matches!(
            generate_dataset(&spec, 0, dir.path()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn source_and_target_priors_differ() {
        let s = DomainSpec::source_like(32, 32, 0);
        let t = DomainSpec::target_like(32, 32, 0);
        assert_ne!(s.ptv_center_y, t.ptv_center_y);
        assert_ne!(s.ptv_radius, t.ptv_radius);
    }
}
