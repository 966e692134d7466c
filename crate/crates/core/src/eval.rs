//! Desk-scale metrics: an 8-dimensional handcrafted feature vector feeding a
//! Fréchet feature distance (FFD), and an analytic per-class pattern score.
//! Both are deterministic, so report CSVs are byte-stable.

use std::collections::BTreeMap;

use nalgebra::SMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::amplify::{AmplifiedPredictor, AmplifyConfig, MixTarget};
use crate::datagen::{make_dataset, render_analytic, PatternClass};
use crate::diffusion::{sample, ModelPredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::unet::ParameterStore;

pub const FEATURE_DIM: usize = 8;
pub type FeatureVector = [f64; FEATURE_DIM];

/// Default reference-set size per evaluated resolution.
pub const REFERENCE_SET_SIZE: usize = 256;

/// Minimum set size for covariance estimation in the Fréchet distance.
pub const MIN_SET_SIZE: usize = 16;

type M8 = SMatrix<f64, FEATURE_DIM, FEATURE_DIM>;

/// Size-normalized per-image features: mean, variance, horizontal and
/// vertical gradient energy, and four radial spectral band energies
/// (fractions of the Nyquist radius).
pub fn features(image: &Tensor) -> Result<FeatureVector> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("features expects [1,H,W], got C={c}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("image {h}x{w} below minimum 8x8")));
    }
    let d = image.data();
    let n = (h * w) as f64;

    let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = d
        .iter()
        .map(|&v| {
            let e = f64::from(v) - mean;
            e * e
        })
        .sum::<f64>()
        / n;

    let mut hgrad = 0.0f64;
    for i in 0..h {
        for j in 0..w - 1 {
            let g = f64::from(d[i * w + j + 1]) - f64::from(d[i * w + j]);
            hgrad += g * g;
        }
    }
    hgrad /= (h * (w - 1)) as f64;

    let mut vgrad = 0.0f64;
    for i in 0..h - 1 {
        for j in 0..w {
            let g = f64::from(d[(i + 1) * w + j]) - f64::from(d[i * w + j]);
            vgrad += g * g;
        }
    }
    vgrad /= ((h - 1) * w) as f64;

    let bands = spectral_bands(d, h, w);

    Ok([
        mean, var, hgrad, vgrad, bands[0], bands[1], bands[2], bands[3],
    ])
}

/// Power in four radial frequency bands, normalized so the total equals the
/// mean square of the image regardless of grid size. DC is excluded.
fn spectral_bands(data: &[f32], h: usize, w: usize) -> [f64; 4] {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut grid: Vec<Complex<f64>> = data
        .iter()
        .map(|&v| Complex::new(f64::from(v), 0.0))
        .collect();
    for i in 0..h {
        row_fft.process(&mut grid[i * w..(i + 1) * w]);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = grid[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            grid[i * w + j] = col[i];
        }
    }

    let norm = ((h * w) as f64) * ((h * w) as f64);
    let mut bands = [0.0f64; 4];
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let fu = u.min(h - u) as f64 / (h as f64 / 2.0);
            let fv = v.min(w - v) as f64 / (w as f64 / 2.0);
            let r = (fu * fu + fv * fv).sqrt();
            let p = grid[u * w + v].norm_sqr() / norm;
            let band = if r <= 0.25 {
                0
            } else if r <= 0.5 {
                1
            } else if r <= 0.75 {
                2
            } else {
                3
            };
            bands[band] += p;
        }
    }
    bands
}

fn moments(set: &[FeatureVector]) -> (nalgebra::SVector<f64, FEATURE_DIM>, M8) {
    let n = set.len() as f64;
    let mut mu = nalgebra::SVector::<f64, FEATURE_DIM>::zeros();
    for fv in set {
        for (k, &v) in fv.iter().enumerate() {
            mu[k] += v;
        }
    }
    mu /= n;
    let mut cov = M8::zeros();
    for fv in set {
        for a in 0..FEATURE_DIM {
            for b in 0..FEATURE_DIM {
                cov[(a, b)] += (fv[a] - mu[a]) * (fv[b] - mu[b]);
            }
        }
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition with eigenvalues clamped
/// at zero.
fn sqrtm_psd(m: &M8) -> M8 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut d = M8::zeros();
    for i in 0..FEATURE_DIM {
        d[(i, i)] = sqrt_vals[i];
    }
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussians fitted to the two feature sets:
/// ‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2}).
pub fn frechet_distance(set_a: &[FeatureVector], set_b: &[FeatureVector]) -> Result<f64> {
    if set_a.len() < MIN_SET_SIZE || set_b.len() < MIN_SET_SIZE {
        return Err(Error::invalid(format!(
            "frechet_distance needs sets of >= {MIN_SET_SIZE}, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let (mu_a, cov_a) = moments(set_a);
    let (mu_b, cov_b) = moments(set_b);
    Ok(frechet_gaussian(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Closed-form Fréchet distance between two Gaussians.
pub fn frechet_gaussian(
    mu_a: &nalgebra::SVector<f64, FEATURE_DIM>,
    cov_a: &M8,
    mu_b: &nalgebra::SVector<f64, FEATURE_DIM>,
    cov_b: &M8,
) -> f64 {
    let dmu = mu_a - mu_b;
    let sqrt_a = sqrtm_psd(cov_a);
    let inner = sqrt_a * cov_b * sqrt_a;
    let sqrt_inner = sqrtm_psd(&inner);
    let d2 = dmu.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * sqrt_inner.trace();
    d2.max(0.0)
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let ea = f64::from(x) - ma;
        let eb = f64::from(y) - mb;
        num += ea * eb;
        da += ea * ea;
        db += eb * eb;
    }
    if da < 1e-12 || db < 1e-12 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

/// Normalized correlation against the best-matching jittered analytic template
/// of the class: a coarse-to-fine grid over phase/center offsets, maximum
/// correlation, clamped to [−1, 1].
pub fn pattern_score(image: &Tensor, class: &PatternClass) -> Result<f64> {
    let (_, h, w) = image.dims3()?;
    let mut center = [0.0f64; 2];
    let mut range = class.max_offset(0.5);
    let mut best = f64::NEG_INFINITY;
    for _level in 0..3 {
        let mut best_offsets = center;
        for gi in 0..7 {
            for gj in 0..7 {
                let off = [
                    center[0] + range * (gi as f64 / 3.0 - 1.0),
                    center[1] + range * (gj as f64 / 3.0 - 1.0),
                ];
                let template = render_analytic(class, off, h, w);
                let corr = pearson(image.data(), template.data());
                if corr > best {
                    best = corr;
                    best_offsets = off;
                }
            }
        }
        center = best_offsets;
        range /= 3.0;
    }
    Ok(best.clamp(-1.0, 1.0))
}

/// Which predictor a metrics run drives: dense weights, a pruned mask, or the
/// amplified dual path.
pub struct EvalConfig<'a> {
    pub id: String,
    pub mask: Option<&'a PruneMask>,
    pub k: Option<f64>,
    pub target: MixTarget,
}

impl<'a> EvalConfig<'a> {
    pub fn dense() -> Self {
        Self {
            id: "dense".to_string(),
            mask: None,
            k: None,
            target: MixTarget::Eps,
        }
    }

    pub fn pruned(id: impl Into<String>, mask: &'a PruneMask) -> Self {
        Self {
            id: id.into(),
            mask: Some(mask),
            k: None,
            target: MixTarget::Eps,
        }
    }

    pub fn amplified(id: impl Into<String>, mask: &'a PruneMask, k: f64) -> Self {
        Self {
            id: id.into(),
            mask: Some(mask),
            k: Some(k),
            target: MixTarget::Eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub config_id: String,
    pub height: usize,
    pub width: usize,
    pub ffd: f64,
    pub mean_score: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n: usize,
    pub seed: u64,
}

impl ReportRow {
    pub fn resolution(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "config_id,resolution,ffd,mean_score,per_class_scores_json,n,seed";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let per_class = serde_json::to_string(
                &row.per_class
                    .iter()
                    .map(|(k, v)| (k.clone(), format!("{v:.6}")))
                    .collect::<BTreeMap<_, _>>(),
            )
            .expect("string map serializes");
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{}\n",
                csv_field(&row.config_id),
                row.resolution(),
                row.ffd,
                row.mean_score,
                csv_field(&per_class),
                row.n,
                row.seed
            ));
        }
        out
    }
}

/// Generates one image per entry of `class_list` with the configured
/// predictor; one independent chain per image.
pub fn generate_images(
    store: &ParameterStore,
    sched: &NoiseSchedule,
    config: &EvalConfig,
    class_list: &[PatternClass],
    h: usize,
    w: usize,
    gen_seed: u64,
) -> Result<Vec<(Tensor, PatternClass)>> {
    let class_ids: Vec<usize> = class_list.iter().map(|c| c.index()).collect();

    let images = match (config.mask, config.k) {
        (None, _) => {
            let model = store.resolve::<f32>(None)?;
            sample(&ModelPredictor { model: &model }, sched, &class_ids, h, w, gen_seed)?
        }
        (Some(mask), None) => {
            let model = store.resolve::<f32>(Some(mask))?;
            sample(&ModelPredictor { model: &model }, sched, &class_ids, h, w, gen_seed)?
        }
        (Some(mask), Some(k)) => {
            let dense = store.resolve::<f32>(None)?;
            let pruned = store.resolve::<f32>(Some(mask))?;
            let cfg = AmplifyConfig {
                k,
                target: config.target,
            };
            let predictor = AmplifiedPredictor::new(&dense, &pruned, sched, &cfg);
            sample(&predictor, sched, &class_ids, h, w, gen_seed)?
        }
    };
    let mut out = Vec::with_capacity(images.len());
    for (img, &class) in images.into_iter().zip(class_list) {
        let (_, _, ih, iw) = img.dims4()?;
        out.push((img.reshaped(&[1, ih, iw])?, class));
    }
    Ok(out)
}

/// Classes cycled round-robin over `n` slots.
pub fn cycled_classes(classes: &[PatternClass], n: usize) -> Vec<PatternClass> {
    (0..n).map(|i| classes[i % classes.len()]).collect()
}

/// Reference feature set: fresh renders at the evaluated size, the ground
/// truth distribution for that resolution.
pub fn reference_features(
    classes: &[PatternClass],
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    let per_class = REFERENCE_SET_SIZE.div_ceil(classes.len());
    let refs = make_dataset(classes, per_class, h, w, seed, 0.25)?;
    refs.par_iter().map(|s| features(&s.image)).collect()
}

/// Runs one configuration over the listed sizes and assembles report rows.
/// `n` counts generated images per (size, class).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &ParameterStore,
    sched: &NoiseSchedule,
    config: &EvalConfig,
    sizes: &[(usize, usize)],
    classes: &[PatternClass],
    n: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if classes.is_empty() {
        return Err(Error::invalid("evaluate needs at least one class"));
    }
    if n * classes.len() < MIN_SET_SIZE {
        return Err(Error::invalid(format!(
            "evaluate needs n*classes >= {MIN_SET_SIZE} per size, got {n}x{}",
            classes.len()
        )));
    }
    let mut rows = Vec::new();
    // Class-major image list: n images per class at every size.
    let class_list: Vec<PatternClass> = classes
        .iter()
        .flat_map(|c| std::iter::repeat(*c).take(n))
        .collect();
    for &(h, w) in sizes {
        let size_tag = (h * 100_000 + w) as u64;
        let gen_seed = derive_seed(seed, "gen", size_tag);
        let generated = generate_images(store, sched, config, &class_list, h, w, gen_seed)?;

        let gen_features: Vec<FeatureVector> = generated
            .par_iter()
            .map(|(img, _)| features(img))
            .collect::<Result<_>>()?;
        let ref_features = reference_features(classes, h, w, derive_seed(seed, "ref", size_tag))?;
        let ffd = frechet_distance(&gen_features, &ref_features)?;

        let scores: Vec<(String, f64)> = generated
            .par_iter()
            .map(|(img, class)| Ok((class.id().to_string(), pattern_score(img, class)?)))
            .collect::<Result<_>>()?;
        let mean_score = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
        let mut per_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (id, s) in &scores {
            let e = per_class.entry(id.clone()).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
        rows.push(ReportRow {
            config_id: config.id.clone(),
            height: h,
            width: w,
            ffd,
            mean_score,
            per_class: per_class
                .into_iter()
                .map(|(k, (sum, cnt))| (k, sum / cnt as f64))
                .collect(),
            n,
            seed,
        });
    }
    Ok(MetricsReport { rows })
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub sparsity: f64,
    pub ffd: f64,
    pub score: f64,
}

/// Uniform-ratio sparsity sweep at one size. Returns one report row per grid
/// point plus the (sparsity, ffd, score) curve.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    store: &ParameterStore,
    sched: &NoiseSchedule,
    grid: &[f64],
    h: usize,
    w: usize,
    classes: &[PatternClass],
    n: usize,
    seed: u64,
) -> Result<(MetricsReport, Vec<SweepPoint>)> {
    let mut report = MetricsReport::default();
    let mut curve = Vec::new();
    for &ratio in grid {
        let mask = crate::prune::build_mask(store, &crate::prune::uniform_config(ratio)?)?;
        let config = EvalConfig::pruned(format!("uniform_{ratio:.3}"), &mask);
        let rows = evaluate(store, sched, &config, &[(h, w)], classes, n, seed)?;
        let row = &rows.rows[0];
        curve.push(SweepPoint {
            sparsity: ratio,
            ffd: row.ffd,
            score: row.mean_score,
        });
        report.rows.extend(rows.rows);
    }
    Ok((report, curve))
}

/// Energy for the ratio search: negated mean pattern score over a fixed
/// evaluation set generated with common random numbers, optionally restricted
/// to one class.
pub struct ModelEnergy<'a> {
    pub store: &'a ParameterStore,
    pub sched: &'a NoiseSchedule,
    pub classes: Vec<PatternClass>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub scope: crate::prune::PruneScope,
}

impl crate::anneal::EnergyFn for ModelEnergy<'_> {
    fn evaluate(&self, config: &crate::prune::RatioConfig) -> Result<f64> {
        let mask = crate::prune::build_mask_scoped(self.store, config, self.scope)?;
        let eval = EvalConfig::pruned("candidate", &mask);
        let class_list = cycled_classes(&self.classes, self.n);
        let images = generate_images(
            self.store,
            self.sched,
            &eval,
            &class_list,
            self.h,
            self.w,
            self.seed,
        )?;
        let scores: Vec<f64> = images
            .par_iter()
            .map(|(img, class)| pattern_score(img, class))
            .collect::<Result<_>>()?;
        Ok(-scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render, PatternKind};
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_image_features() {
        let img = Tensor::filled(&[1, 16, 16], 0.4);
        let f = features(&img).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-6);
        for v in &f[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn checkerboard_period_two_concentrates_in_top_band() {
        let img = Tensor::from_fn(&[1, 16, 16], |i| {
            let (r, c) = (i / 16, i % 16);
            if (r + c) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let f = features(&img).unwrap();
        let total: f64 = f[4..8].iter().sum();
        assert!(f[7] / total > 0.99, "top band share {}", f[7] / total);
    }

    #[test]
    fn negated_image_has_same_energy_features() {
        let img = render(
            &PatternClass::standard(PatternKind::Ring),
            3,
            16,
            16,
            0.25,
        )
        .unwrap()
        .image;
        let neg = img.scale(-1.0);
        let fa = features(&img).unwrap();
        let fb = features(&neg).unwrap();
        assert!((fa[0] + fb[0]).abs() < 1e-9);
        for k in 1..8 {
            assert!((fa[k] - fb[k]).abs() < 1e-9, "feature {k}");
        }
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = substream(1, "fid", 0);
        let set: Vec<FeatureVector> = (0..32)
            .map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let d = frechet_distance(&set, &set).unwrap();
        assert!(d < 1e-8, "self distance {d}");
    }

    #[test]
    fn frechet_point_masses_reduce_to_mean_distance() {
        // Two nearly-degenerate clouds: distance approaches |mu_a - mu_b|^2.
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut rng = substream(2, "fid", 0);
        for _ in 0..32 {
            let e: f64 = rng.sample::<f64, _>(StandardNormal);
            let mut fa = [0.0f64; 8];
            let mut fb = [1.0f64; 8];
            fa[0] += e * 1e-9;
            fb[0] += e * 1e-9;
            a.push(fa);
            b.push(fb);
        }
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 8.0).abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut rng = substream(3, "fid", 0);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| -> Vec<FeatureVector> {
            (0..64)
                .map(|_| {
                    std::array::from_fn(|k| {
                        rng.sample::<f64, _>(StandardNormal) * (1.0 + k as f64 * 0.1) + shift
                    })
                })
                .collect()
        };
        let a = mk(&mut rng, 0.0);
        let b = mk(&mut rng, 0.5);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!(dab >= 0.0);
        assert!((dab - dba).abs() < 1e-9);
        assert!(frechet_distance(&a[..8], &b).is_err());
    }

    #[test]
    fn rendered_sample_scores_high_against_own_class() {
        for class in PatternClass::all_standard() {
            for seed in 0..4u64 {
                let s = render(&class, seed, 16, 16, 0.25).unwrap();
                let score = pattern_score(&s.image, &class).unwrap();
                assert!(
                    score >= 0.99,
                    "class {} seed {seed}: self score {score}",
                    class.id()
                );
            }
        }
    }

    #[test]
    fn white_noise_scores_near_zero() {
        let classes = PatternClass::all_standard();
        for class in &classes {
            let mut acc = 0.0;
            let trials = 16;
            for seed in 0..trials {
                let mut rng = substream(seed, "noise-img", 0);
                let img = Tensor::from_fn(&[1, 32, 32], |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z as f32
                });
                acc += pattern_score(&img, class).unwrap();
            }
            let mean = acc / trials as f64;
            assert!(
                mean.abs() < 0.1,
                "class {}: mean noise score {mean}",
                class.id()
            );
        }
    }

    #[test]
    fn cross_class_score_is_lower_than_own_class() {
        let cb = PatternClass::standard(PatternKind::Checkerboard);
        let stripes = PatternClass::standard(PatternKind::Stripes);
        let img = render(&cb, 5, 16, 16, 0.25).unwrap().image;
        let own = pattern_score(&img, &cb).unwrap();
        let cross = pattern_score(&img, &stripes).unwrap();
        assert!(cross < own, "own {own} vs cross {cross}");
    }

    #[test]
    fn scores_stay_bounded() {
        let class = PatternClass::standard(PatternKind::RadialBlob);
        let img = Tensor::filled(&[1, 12, 12], 1.0);
        let s = pattern_score(&img, &class).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }
}
