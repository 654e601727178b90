//! Analytic-versus-finite-difference gradient checks on a fixed fixture.

use std::fmt::Write as _;

use crate::attack::{eot_loss_and_grad, IdentityLoss, Objective, DEFAULT_LAMBDA};
use crate::camera::{default_frontal, rotate_view, CameraView, Pose};
use crate::embedder::{cosine_similarity, reference_embedding, SurrogateEmbedder};
use crate::error::Result;
use crate::renderer::{fd_gradient_masked, fd_step, render, render_backward, Image, ParamClass, RenderOptions};
use crate::scene::{synth_scene, Layout, ParamTensor, Scene};

pub const RENDER_TOLERANCE: f64 = 1e-4;
pub const CHAIN_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub primitives: usize,
    pub side: usize,
    pub chain_primitives: usize,
    pub chain_side: usize,
    pub h: f64,
    /// Test hook: perturbs every analytic gradient by 1% so the check must
    /// fail.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            primitives: 20,
            side: 32,
            chain_primitives: 10,
            chain_side: 64,
            h: 1e-4,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared; the rest straddle a cull, cap, clamp or
    /// support boundary.
    pub checked: usize,
    pub total: usize,
    pub tolerance: f64,
    /// Coordinates over tolerance.
    pub offending: Vec<usize>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            writeln!(
                s,
                "{:<14} max_rel_error = {:.3e}  checked = {}/{}  tolerance = {:.0e}  {}",
                r.name,
                r.max_rel_error,
                r.checked,
                r.total,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            )
            .unwrap();
            if !r.passed() {
                let shown: Vec<String> = r.offending.iter().take(20).map(usize::to_string).collect();
                writeln!(s, "  offending coordinates: {}", shown.join(", ")).unwrap();
            }
        }
        s
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(FLOOR)
}

fn compare(name: String, analytic: &[f64], fd: &[f64], smooth: &[bool], tolerance: f64) -> CheckResult {
    let mut max_rel_error = 0.0f64;
    let mut offending = Vec::new();
    let mut checked = 0;
    for i in 0..fd.len() {
        if !smooth[i] {
            continue;
        }
        checked += 1;
        let e = relative_error(analytic[i], fd[i]);
        max_rel_error = max_rel_error.max(e);
        if e >= tolerance {
            offending.push(i);
        }
    }
    CheckResult {
        name,
        max_rel_error,
        checked,
        total: fd.len(),
        tolerance,
        offending,
    }
}

/// Head scene with a second SH band carrying small nonzero coefficients,
/// so every parameter class, the view-dependent one included, is live.
pub fn fixture_scene(seed: u64, primitives: usize) -> Result<Scene> {
    let mut s = synth_scene(seed, primitives, Layout::HeadLike)?.with_sh_bands(2)?;
    for (i, p) in s.primitives.iter_mut().enumerate() {
        for (k, c) in p.sh_rest.iter_mut().enumerate() {
            let t = (i * 3 + k) as f64;
            *c = [0.08 * t.sin(), 0.06 * (1.3 * t).cos(), -0.05 * (0.7 * t).sin()];
        }
    }
    Ok(s)
}

fn fixture_view(side: usize) -> Result<CameraView> {
    Ok(rotate_view(&default_frontal(side, side)?, 0.1, -0.15))
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 1009) as f64 / 1009.0 - 0.5).collect()
}

fn corrupt(g: &mut [f64], on: bool) {
    if on {
        for v in g {
            *v *= 1.01;
        }
    }
}

/// Every parameter class against central differences of a fixed weighted
/// pixel sum.
pub fn check_render_classes(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let scene = fixture_scene(opts.seed, opts.primitives)?;
    let view = fixture_view(opts.side)?;
    let pose = Pose::identity();
    let render_opts = RenderOptions {
        view_dependent: true,
        ..RenderOptions::default()
    };
    let w = weights(3 * opts.side * opts.side);
    let loss = |img: &Image| img.pixels.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>();
    let (_, inter) = render(&scene, &view, &pose, &render_opts)?;
    ParamClass::ALL
        .into_iter()
        .map(|class| {
            let mut analytic = render_backward(&scene, &view, &pose, &inter, &w, class)?;
            corrupt(&mut analytic, opts.corrupt_backward);
            let (fd, smooth) = fd_gradient_masked(&scene, &view, &pose, &render_opts, &loss, class, opts.h)?;
            Ok(compare(class.name().to_string(), &analytic, &fd, &smooth, RENDER_TOLERANCE))
        })
        .collect()
}

/// Identity loss of the EOT estimator over two fixed off-frontal views,
/// differentiated through render, align, embed and cosine with respect to
/// every DC coefficient.
pub fn check_chain(opts: &GradcheckOptions, embedder: &SurrogateEmbedder) -> Result<CheckResult> {
    let scene = synth_scene(opts.seed, opts.chain_primitives, Layout::HeadLike)?;
    let base = default_frontal(opts.chain_side, opts.chain_side)?;
    let views = vec![rotate_view(&base, 0.12, 0.2), rotate_view(&base, -0.2, -0.1)];
    let pose = Pose::identity();
    let render_opts = RenderOptions::default();
    let reference = reference_embedding(embedder, &scene, &base, &pose, &render_opts)?;
    let objective = IdentityLoss { lambda: DEFAULT_LAMBDA };
    let tensor = ParamTensor::dc(&scene, (0..scene.len()).collect())?;
    let eval = eot_loss_and_grad(&scene, &tensor, &views, &pose, embedder, &reference, &objective, &render_opts)?;
    let mut analytic = eval.grad;
    corrupt(&mut analytic, opts.corrupt_backward);

    let base_sig: Vec<u64> = views
        .iter()
        .map(|v| Ok(render(&scene, v, &pose, &render_opts)?.1.signature()))
        .collect::<Result<_>>()?;
    let loss_at = |t: &ParamTensor| -> Result<(f64, bool)> {
        let mut s = scene.clone();
        t.write_into(&mut s);
        let mut total = 0.0;
        let mut same = true;
        for (v, sig) in views.iter().zip(&base_sig) {
            let (img, inter) = render(&s, v, &pose, &render_opts)?;
            same &= inter.signature() == *sig;
            let sim = cosine_similarity(&embedder.embed_image(&img)?, &reference)?;
            total += objective.eval(sim).0;
        }
        Ok((total / views.len() as f64, same))
    };
    let mut fd = Vec::with_capacity(tensor.len());
    let mut smooth = Vec::with_capacity(tensor.len());
    for i in 0..tensor.len() {
        let h = fd_step(tensor.values[i], opts.h);
        let mut p = tensor.clone();
        let mut m = tensor.clone();
        p.values[i] += h;
        m.values[i] -= h;
        let (lp, sp) = loss_at(&p)?;
        let (lm, sm) = loss_at(&m)?;
        fd.push((lp - lm) / (2.0 * h));
        smooth.push(sp && sm);
    }
    Ok(compare("chain_dc_color".into(), &analytic, &fd, &smooth, CHAIN_TOLERANCE))
}

pub fn run_gradcheck(opts: &GradcheckOptions, embedder: &SurrogateEmbedder) -> Result<GradcheckReport> {
    let mut results = check_render_classes(opts)?;
    results.push(check_chain(opts, embedder)?);
    Ok(GradcheckReport { results })
}
