//! Stokes imaging of vector vortex beams, RGB encoding and labelled
//! dataset generation.
//!
//! Conventions: S1 = (I_H − I_V)/I, S2 = (I_D − I_A)/I, S3 = (I_L − I_R)/I,
//! so left-circular light has S3 = +1. RGB channels carry (S1, S2, S3)
//! mapped to [0, 255] and gated by I/I_max.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    ideal_walk, simulate_numeric, solve_coins, HyggProfiles, SemiAnalyticOptions, SolveOptions, TermCache,
    VvbTarget, WalkSpec, WalkerState, WALKER_M,
};
use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::modes::{BeamParams, HyggIndex, LgIndex, PolarizedSuperposition, RadialSeries, DEFAULT_HYGG_TERMS};
use crate::polarization::{Jones, Pol};

/// Pixels below this fraction of the peak intensity get S = 0.
pub const INTENSITY_FLOOR: f64 = 1e-3;
pub const IMAGE_SIZE: usize = 128;
/// Simulation grid, cropped to the central `IMAGE_SIZE` pixels.
pub const RENDER_SIZE: usize = 256;
/// Rendering grid extent in beam waists.
pub const RENDER_WAISTS: f64 = 12.0;
pub const MANIFEST_SCHEMA: &str = "oamsim-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// θ of every dataset VVB.
pub const DATASET_THETA: f64 = PI / 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StokesImage {
    pub n: usize,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl StokesImage {
    pub fn max_intensity(&self) -> f64 {
        self.intensity.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest s1² + s2² + s3² over pixels above the floor.
    pub fn max_norm_sqr(&self) -> f64 {
        let floor = INTENSITY_FLOOR * self.max_intensity();
        (0..self.s1.len())
            .filter(|&i| self.intensity[i] > floor)
            .map(|i| self.s1[i].powi(2) + self.s2[i].powi(2) + self.s3[i].powi(2))
            .fold(0.0, f64::max)
    }
}

fn stokes_from_components(n: usize, l: &[Complex64], r: &[Complex64]) -> StokesImage {
    let h = Jones::H;
    let v = Jones::V;
    let d = Jones::D;
    let a = Jones::A;
    let proj = |j: &Jones, i: usize| (j.l().conj() * l[i] + j.r().conj() * r[i]).norm_sqr();
    let mut img = StokesImage {
        n,
        s1: vec![0.0; n * n],
        s2: vec![0.0; n * n],
        s3: vec![0.0; n * n],
        intensity: (0..n * n).map(|i| l[i].norm_sqr() + r[i].norm_sqr()).collect(),
    };
    let floor = INTENSITY_FLOOR * img.max_intensity();
    for i in 0..n * n {
        let total = img.intensity[i];
        if total <= floor || total == 0.0 {
            continue;
        }
        img.s1[i] = (proj(&h, i) - proj(&v, i)) / total;
        img.s2[i] = (proj(&d, i) - proj(&a, i)) / total;
        img.s3[i] = (l[i].norm_sqr() - r[i].norm_sqr()) / total;
    }
    img
}

/// Stokes parameters from the six projections H/V, D/A, L/R.
pub fn stokes_from_field(f: &Field) -> StokesImage {
    stokes_from_components(f.grid.n, f.component(Pol::L), f.component(Pol::R))
}

/// channel = round(255·(S + 1)/2 · I/I_max), row-major RGB.
pub fn rgb_encode(s: &StokesImage) -> Vec<u8> {
    let peak = s.max_intensity();
    let mut out = Vec::with_capacity(3 * s.s1.len());
    for i in 0..s.s1.len() {
        let gate = if peak > 0.0 { s.intensity[i] / peak } else { 0.0 };
        for v in [s.s1[i], s.s2[i], s.s3[i]] {
            out.push((255.0 * (v + 1.0) / 2.0 * gate).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Inverse of [`rgb_encode`] given the intensity used for gating. Pixels
/// with zero gate decode to S = 0.
pub fn rgb_decode(rgb: &[u8], intensity: &[f64], n: usize) -> StokesImage {
    let peak = intensity.iter().cloned().fold(0.0, f64::max);
    let mut s = StokesImage {
        n,
        s1: vec![0.0; n * n],
        s2: vec![0.0; n * n],
        s3: vec![0.0; n * n],
        intensity: intensity.to_vec(),
    };
    for i in 0..n * n {
        let gate = if peak > 0.0 { intensity[i] / peak } else { 0.0 };
        if gate == 0.0 {
            continue;
        }
        let dec = |c: u8| 2.0 * c as f64 / (255.0 * gate) - 1.0;
        s.s1[i] = dec(rgb[3 * i]);
        s.s2[i] = dec(rgb[3 * i + 1]);
        s.s3[i] = dec(rgb[3 * i + 2]);
    }
    s
}

fn bilinear(data: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |ix: f64, iy: f64| {
        if ix < 0.0 || iy < 0.0 || ix >= n as f64 || iy >= n as f64 {
            0.0
        } else {
            data[iy as usize * n + ix as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy) + at(x0 + 1.0, y0) * fx * (1.0 - fy) + at(x0, y0 + 1.0) * (1.0 - fx) * fy + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Dominant angular harmonic of S1 on the ring of peak azimuthally averaged
/// intensity, about the intensity centroid.
pub fn azimuthal_period(s: &StokesImage) -> Result<usize> {
    let n = s.n;
    let total: f64 = s.intensity.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoRing("image has no intensity".into()));
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, v) in s.intensity.iter().enumerate() {
        cx += (i % n) as f64 * v;
        cy += (i / n) as f64 * v;
    }
    cx /= total;
    cy /= total;
    let bins = n / 2;
    let mut radial = vec![(0.0, 0usize); bins];
    for (i, v) in s.intensity.iter().enumerate() {
        let r = ((i % n) as f64 - cx).hypot((i / n) as f64 - cy);
        let b = r.round() as usize;
        if b < bins {
            radial[b].0 += v;
            radial[b].1 += 1;
        }
    }
    let profile: Vec<f64> = radial.iter().map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect();
    let (ring, peak) = profile
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    if ring < 2 || peak <= profile[0] * 1.5 {
        return Err(Error::NoRing("no intensity ring away from the center".into()));
    }
    let samples = 512;
    let values: Vec<f64> = (0..samples)
        .map(|j| {
            let phi = 2.0 * PI * j as f64 / samples as f64;
            bilinear(&s.s1, n, cx + ring as f64 * phi.cos(), cy + ring as f64 * phi.sin())
        })
        .collect();
    let best = (1..=samples / 4)
        .map(|k| {
            let c: Complex64 = values
                .iter()
                .enumerate()
                .map(|(j, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * j) as f64 / samples as f64))
                .sum();
            (k, c.norm())
        })
        .fold((0, 0.0), |acc, (k, a)| if a > acc.1 { (k, a) } else { acc });
    if best.1 <= 1e-9 * samples as f64 {
        return Err(Error::NoRing("S1 is flat on the ring".into()));
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// perturbations

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Waveplate angle errors are uniform in ±this bound (radians).
    pub wp_angle_sigma_max: f64,
    /// Beam center offsets are uniform in ±this bound per axis (m).
    pub center_jitter: f64,
    /// Additive intensity noise, standard deviation relative to the peak.
    pub intensity_noise: f64,
    /// Waist errors are uniform in ±this bound (m).
    pub waist_error: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            wp_angle_sigma_max: 3f64.to_radians(),
            center_jitter: 0.0,
            intensity_noise: 0.0,
            waist_error: 0.0,
        }
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        PerturbationSpec {
            wp_angle_sigma_max: 0.0,
            ..Default::default()
        }
    }

    /// The corpus standing in for lab images: angle errors, jitter, waist
    /// error and 2% intensity noise.
    pub fn pseudo_experimental(w0: f64) -> Self {
        PerturbationSpec {
            wp_angle_sigma_max: 3f64.to_radians(),
            center_jitter: 0.05 * w0,
            intensity_noise: 0.02,
            waist_error: 0.05 * w0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.wp_angle_sigma_max, self.center_jitter, self.intensity_noise, self.waist_error];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("perturbation bounds must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn draw_angle_errors(&self, rng: &mut impl Rng, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.uniform(rng, self.wp_angle_sigma_max)).collect()
    }

    fn uniform(&self, rng: &mut impl Rng, bound: f64) -> f64 {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    }
}

// ---------------------------------------------------------------------------
// dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetModel {
    Lg,
    Hygg,
    PseudoExperimental,
}

impl std::str::FromStr for DatasetModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lg" => Ok(DatasetModel::Lg),
            "hygg" => Ok(DatasetModel::Hygg),
            "pseudo-experimental" | "pseudo" | "experimental" => Ok(DatasetModel::PseudoExperimental),
            other => Err(Error::Config(format!("unknown dataset model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub m1: i32,
    pub m2: i32,
}

/// The 15 unordered charge pairs m1 < m2 from the walker positions.
pub fn classes() -> Vec<ClassLabel> {
    let mut out = Vec::new();
    for (i, &m1) in WALKER_M.iter().enumerate() {
        for &m2 in &WALKER_M[i + 1..] {
            out.push(ClassLabel { id: out.len(), m1, m2 });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class: usize,
    pub m1: i32,
    pub m2: i32,
    pub beta: f64,
}

/// JSON manifest written next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub model_tag: DatasetModel,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub theta: f64,
    pub perturbation: PerturbationSpec,
    pub classes: Vec<ClassLabel>,
    pub files: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes != classes() {
            return Err(Error::Config("manifest classes are not the 15 charge pairs".into()));
        }
        if self.files.len() != self.classes.len() * self.per_class {
            return Err(Error::Config(format!(
                "manifest lists {} files, expected {}",
                self.files.len(),
                self.classes.len() * self.per_class
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let m: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn image_file_name(class: usize, index: usize) -> String {
    format!("{class:02}_{index:04}.png")
}

/// Independent stream per (seed, class, index).
pub fn image_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// Everything shared by the images of one dataset.
pub struct Renderer {
    pub model: DatasetModel,
    pub template: WalkSpec,
    pub grid: Grid,
    /// Walks tuned to each class at β = 0.
    pub walks: Vec<WalkSpec>,
    profiles: Option<HyggProfiles>,
    /// E_m sampled on `grid` at the nominal waist.
    basis: BTreeMap<i32, Vec<Complex64>>,
}

impl Renderer {
    pub fn new(model: DatasetModel, template: &WalkSpec, solve: &SolveOptions, cache: &TermCache) -> Result<Renderer> {
        let grid = Grid::new(RENDER_SIZE, RENDER_WAISTS * template.beam.w0)?;
        let mut walks = Vec::new();
        for c in classes() {
            let target = vvb_walker_target(c.m1, c.m2, 0.0)?;
            walks.push(solve_coins(&target, template, solve)?.spec);
        }
        let profiles = match model {
            DatasetModel::Hygg => Some(HyggProfiles::from_cascade(template, &SemiAnalyticOptions::new(grid), solve, cache)?),
            _ => None,
        };
        let mut r = Renderer {
            model,
            template: template.clone(),
            grid,
            walks,
            profiles,
            basis: BTreeMap::new(),
        };
        if model != DatasetModel::PseudoExperimental {
            for m in WALKER_M {
                let e = r.mode_profile(m, &template.beam)?;
                r.basis.insert(m, e);
            }
        }
        Ok(r)
    }

    fn mode_profile(&self, m: i32, beam: &BeamParams) -> Result<Vec<Complex64>> {
        let frame = beam.at(self.template.output_z());
        let series = match &self.profiles {
            Some(p) => {
                let mut acc = RadialSeries {
                    m,
                    coeffs: vec![Complex64::new(0.0, 0.0); DEFAULT_HYGG_TERMS + 1],
                };
                for (p, c) in p.profiles.get(&m).into_iter().flatten() {
                    let s = RadialSeries::hygg(HyggIndex { p: *p, m }, &frame, self.profiles_origin(), DEFAULT_HYGG_TERMS)?;
                    acc.coeffs.iter_mut().zip(&s.coeffs).for_each(|(a, b)| *a += c * b);
                }
                acc
            }
            None => RadialSeries::lg(LgIndex::new(0, m)),
        };
        Ok(series.sample(&self.grid, &frame))
    }

    fn profiles_origin(&self) -> f64 {
        self.profiles.as_ref().map_or(0.0, |p| p.origin_z)
    }

    /// Field of class `class` with rotator angle `beta`, before cropping.
    pub fn render_field(&self, class: usize, beta: f64, pert: &PerturbationSpec, rng: &mut impl Rng) -> Result<Field> {
        let errors = pert.draw_angle_errors(rng, 3 * self.walks[class].steps.len());
        let angles: Vec<f64> = self.walks[class].coin_angles().iter().zip(&errors).map(|(a, e)| a + e).collect();
        let mut spec = self.walks[class].with_coin_angles(&angles);
        let dw = pert.uniform(rng, pert.waist_error);
        spec.beam = BeamParams::new(spec.beam.w0 + dw, spec.beam.wavelength)?;
        let field = match self.model {
            DatasetModel::PseudoExperimental => simulate_numeric(&spec, self.grid)?,
            _ => {
                let walker = ideal_walk(&spec);
                let rescaled;
                let basis = if dw != 0.0 {
                    let mut b = BTreeMap::new();
                    for m in WALKER_M {
                        b.insert(m, self.mode_profile(m, &spec.beam)?);
                    }
                    rescaled = b;
                    &rescaled
                } else {
                    &self.basis
                };
                self.combine(&walker, basis, &spec)
            }
        };
        let rot = Complex64::from_polar(1.0, beta);
        let mut out = field;
        out.component_mut(Pol::R).iter_mut().for_each(|v| *v *= rot);
        Ok(out)
    }

    fn combine(&self, walker: &WalkerState, basis: &BTreeMap<i32, Vec<Complex64>>, spec: &WalkSpec) -> Field {
        let n = self.grid.n;
        let mut f = Field::zeros(self.grid, spec.output_z(), spec.beam.wavelength);
        for (m, e) in basis {
            for pol in [Pol::L, Pol::R] {
                let a = walker.get(pol, *m);
                if a.norm_sqr() == 0.0 {
                    continue;
                }
                let comp = f.component_mut(pol);
                for i in 0..n * n {
                    comp[i] += a * e[i];
                }
            }
        }
        f
    }

    /// Cropped, jittered and noise-corrupted Stokes image.
    pub fn render(&self, class: usize, beta: f64, pert: &PerturbationSpec, rng: &mut impl Rng) -> Result<StokesImage> {
        let field = self.render_field(class, beta, pert, rng)?;
        let dx = self.grid.dx();
        let jx = (pert.uniform(rng, pert.center_jitter) / dx).round() as isize;
        let jy = (pert.uniform(rng, pert.center_jitter) / dx).round() as isize;
        let (n, k) = (self.grid.n as isize, IMAGE_SIZE as isize);
        let half = (n - k) / 2;
        let crop = |src: &[Complex64]| -> Vec<Complex64> {
            let mut out = vec![Complex64::new(0.0, 0.0); (k * k) as usize];
            for y in 0..k {
                for x in 0..k {
                    let (sx, sy) = (x + half - jx, y + half - jy);
                    if (0..n).contains(&sx) && (0..n).contains(&sy) {
                        out[(y * k + x) as usize] = src[(sy * n + sx) as usize];
                    }
                }
            }
            out
        };
        let l = crop(field.component(Pol::L));
        let r = crop(field.component(Pol::R));
        if pert.intensity_noise == 0.0 {
            return Ok(stokes_from_components(IMAGE_SIZE, &l, &r));
        }
        Ok(noisy_stokes(&l, &r, pert.intensity_noise, rng))
    }
}

/// Stokes image from six projections each corrupted by additive Gaussian
/// noise of `sigma`·I_max; polarization vectors longer than 1 are rescaled.
fn noisy_stokes(l: &[Complex64], r: &[Complex64], sigma: f64, rng: &mut impl Rng) -> StokesImage {
    let n = IMAGE_SIZE;
    let peak = l.iter().zip(r).map(|(a, b)| a.norm_sqr() + b.norm_sqr()).fold(0.0, f64::max);
    let bases = [Jones::H, Jones::V, Jones::D, Jones::A, Jones::L, Jones::R];
    let mut img = StokesImage {
        n,
        s1: vec![0.0; n * n],
        s2: vec![0.0; n * n],
        s3: vec![0.0; n * n],
        intensity: vec![0.0; n * n],
    };
    let mut proj = vec![[0.0; 6]; n * n];
    for (i, px) in proj.iter_mut().enumerate() {
        for (slot, b) in px.iter_mut().zip(&bases) {
            let clean = (b.l().conj() * l[i] + b.r().conj() * r[i]).norm_sqr();
            let noise: f64 = rng.sample(StandardNormal);
            *slot = (clean + sigma * peak * noise).max(0.0);
        }
        img.intensity[i] = px.iter().sum::<f64>() / 3.0;
    }
    let floor = INTENSITY_FLOOR * img.max_intensity();
    for (i, p) in proj.iter().enumerate() {
        let pair = |a: f64, b: f64| if a + b > 0.0 { (a - b) / (a + b) } else { 0.0 };
        if img.intensity[i] <= floor {
            continue;
        }
        let mut v = [pair(p[0], p[1]), pair(p[2], p[3]), pair(p[4], p[5])];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        img.s1[i] = v[0];
        img.s2[i] = v[1];
        img.s3[i] = v[2];
    }
    img
}

/// Walker-space VVB a|m1⟩L + b|m2⟩R at θ = π/2.
pub fn vvb_walker_target(m1: i32, m2: i32, beta: f64) -> Result<PolarizedSuperposition> {
    let t = VvbTarget::new(DATASET_THETA, beta, m1, m2)?;
    Ok(crate::cascade::vvb_target(&t, crate::cascade::ModeModel::Lg))
}

/// Renders `per_class` images for each class into `out_dir` and writes the
/// manifest.
pub fn generate_dataset(
    model: DatasetModel,
    per_class: usize,
    pert: &PerturbationSpec,
    seed: u64,
    out_dir: &Path,
    template: &WalkSpec,
    cache: &TermCache,
) -> Result<DatasetManifest> {
    pert.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let renderer = Renderer::new(model, template, &SolveOptions::default(), cache)?;
    let jobs: Vec<(ClassLabel, usize)> = classes()
        .into_iter()
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let files = jobs
        .par_iter()
        .map(|&(c, idx)| -> Result<ManifestEntry> {
            let mut rng = image_rng(seed, c.id, idx);
            let beta = rng.random_range(0.0..2.0 * PI);
            let img = renderer.render(c.id, beta, pert, &mut rng)?;
            let file = image_file_name(c.id, idx);
            let n = IMAGE_SIZE as u32;
            image::RgbImage::from_raw(n, n, rgb_encode(&img))
                .expect("buffer matches dimensions")
                .save(out_dir.join(&file))?;
            Ok(ManifestEntry {
                file,
                class: c.id,
                m1: c.m1,
                m2: c.m2,
                beta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        model_tag: model,
        per_class,
        image_size: IMAGE_SIZE,
        seed,
        theta: DATASET_THETA,
        perturbation: *pert,
        classes: classes(),
        files,
    };
    manifest.validate()?;
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// image comparison

/// Pearson correlation of two equal-length byte buffers.
pub fn correlation(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Mean SSIM over non-overlapping 8×8 blocks of each channel of two
/// interleaved images with `channels` channels.
pub fn ssim(a: &[u8], b: &[u8], width: usize, channels: usize) -> f64 {
    const BLOCK: usize = 8;
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let height = a.len() / (width * channels);
    let (mut acc, mut count) = (0.0, 0usize);
    for ch in 0..channels {
        for by in (0..height.saturating_sub(BLOCK - 1)).step_by(BLOCK) {
            for bx in (0..width.saturating_sub(BLOCK - 1)).step_by(BLOCK) {
                let px = |buf: &[u8], x: usize, y: usize| buf[((by + y) * width + bx + x) * channels + ch] as f64;
                let k = (BLOCK * BLOCK) as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        ma += px(a, x, y);
                        mb += px(b, x, y);
                    }
                }
                ma /= k;
                mb /= k;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        let (da, db) = (px(a, x, y) - ma, px(b, x, y) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= k - 1.0;
                vb /= k - 1.0;
                cov /= k - 1.0;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        1.0
    } else {
        acc / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::RadialSeries;

    fn vvb_field(m1: i32, m2: i32, beta: f64) -> Field {
        let beam = BeamParams::new(1e-3, 808e-9).unwrap();
        let grid = Grid::new(128, 6e-3).unwrap();
        let a = Field::from_series(grid, &beam, &RadialSeries::lg(LgIndex::new(0, m1)), Jones::L);
        let b = Field::from_series(grid, &beam, &RadialSeries::lg(LgIndex::new(0, m2)), Jones::R);
        a.add_scaled(&b, Complex64::from_polar(1.0, beta)).unwrap()
    }

    #[test]
    fn uniform_states_give_unit_stokes_vectors() {
        let beam = BeamParams::new(1e-3, 808e-9).unwrap();
        let grid = Grid::new(64, 6e-3).unwrap();
        let g = RadialSeries::lg(LgIndex::new(0, 0));
        let h = stokes_from_field(&Field::from_series(grid, &beam, &g, Jones::H));
        let l = stokes_from_field(&Field::from_series(grid, &beam, &g, Jones::L));
        let floor = INTENSITY_FLOOR * h.max_intensity();
        for i in 0..64 * 64 {
            if h.intensity[i] > floor {
                assert!((h.s1[i] - 1.0).abs() < 1e-12 && h.s2[i].abs() < 1e-12 && h.s3[i].abs() < 1e-12);
                assert!((l.s3[i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balanced_vvb_has_no_circular_component_on_the_ring() {
        let s = stokes_from_field(&vvb_field(-1, 1, 0.3));
        let peak = s.max_intensity();
        let ring: Vec<f64> = (0..s.s3.len()).filter(|&i| s.intensity[i] > 0.5 * peak).map(|i| s.s3[i]).collect();
        let mean = ring.iter().sum::<f64>() / ring.len() as f64;
        assert!(mean.abs() <= 0.05);
        assert!(s.max_norm_sqr() <= 1.0 + 1e-6);
    }

    #[test]
    fn azimuthal_period_is_charge_difference() {
        for (m1, m2) in [(-1, 1), (3, 5), (-5, 5), (-3, 1)] {
            let s = stokes_from_field(&vvb_field(m1, m2, 1.0));
            assert_eq!(azimuthal_period(&s).unwrap(), (m2 - m1).unsigned_abs() as usize, "({m1}, {m2})");
        }
    }

    #[test]
    fn dark_image_has_no_ring() {
        let grid = Grid::new(64, 1e-3).unwrap();
        let s = stokes_from_field(&Field::zeros(grid, 0.0, 808e-9));
        assert!(matches!(azimuthal_period(&s), Err(Error::NoRing(_))));
    }

    #[test]
    fn rgb_gate_and_round_trip() {
        let s = StokesImage {
            n: 2,
            s1: vec![1.0, 0.3, 0.0, -0.7],
            s2: vec![0.0, -0.2, 0.0, 0.1],
            s3: vec![0.0, 0.9, 0.0, 0.7],
            intensity: vec![1.0, 1.0, 0.0, 1.0],
        };
        let rgb = rgb_encode(&s);
        assert_eq!(&rgb[0..3], &[255, 128, 128]);
        assert_eq!(&rgb[6..9], &[0, 0, 0]);
        let back = rgb_decode(&rgb, &s.intensity, 2);
        for i in [0, 1, 3] {
            assert!((back.s1[i] - s.s1[i]).abs() <= 1.0 / 255.0 + 1e-12);
            assert!((back.s2[i] - s.s2[i]).abs() <= 1.0 / 255.0 + 1e-12);
            assert!((back.s3[i] - s.s3[i]).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn classes_are_the_fifteen_pairs() {
        let c = classes();
        assert_eq!(c.len(), 15);
        assert!(c.iter().all(|l| l.m1 < l.m2));
        assert_eq!(c[14], ClassLabel { id: 14, m1: 3, m2: 5 });
    }

    #[test]
    fn image_streams_are_independent_and_repeatable() {
        let a: f64 = image_rng(7, 2, 3).random();
        let b: f64 = image_rng(7, 2, 3).random();
        let c: f64 = image_rng(7, 3, 2).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noisy_stokes_stays_physical() {
        let f = vvb_field(-3, 1, 0.0);
        let mut rng = image_rng(1, 0, 0);
        let s = noisy_stokes(f.component(Pol::L), f.component(Pol::R), 0.02, &mut rng);
        assert!(s.max_norm_sqr() <= 1.0 + 1e-9);
    }

    #[test]
    fn ssim_and_correlation_limits() {
        let a: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 7 % 256) as u8).collect();
        assert!((ssim(&a, &a, 16, 3) - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &a) - 1.0).abs() < 1e-12);
        let b: Vec<u8> = a.iter().map(|v| 255 - v).collect();
        assert!(ssim(&a, &b, 16, 3) < 0.5);
        assert!((correlation(&a, &b) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn manifest_validation_counts_files() {
        let m = DatasetManifest {
            schema: MANIFEST_SCHEMA.into(),
            model_tag: DatasetModel::Lg,
            per_class: 1,
            image_size: IMAGE_SIZE,
            seed: 0,
            theta: DATASET_THETA,
            perturbation: PerturbationSpec::none(),
            classes: classes(),
            files: vec![],
        };
        assert!(m.validate().is_err());
    }
}
