//! Adversarial masking under expectation over viewpoints.
//!
//! Every method optimizes one parameter class of a region-restricted subset
//! of primitives. The objective is `softplus(-2λs)` of the cosine similarity
//! `s` between the rendered embedding and the reference, averaged over `K`
//! freshly sampled viewpoints per iteration, and is *ascended*.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{grid_viewpoints, seeded_angles, CameraView, Pose, ViewpointDistribution};
use crate::embedder::{cosine_similarity, Embedding, SurrogateEmbedder};
use crate::error::{Error, Result};
use crate::renderer::{render, render_backward, ParamClass, RenderOptions};
use crate::scene::{quat_norm, select_region, ParamTensor, RegionSet, Scene, SCALE_FLOOR, UNIT_TOLERANCE};

/// Default logit scale of the loss.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgd,
    Fgsm,
    Ddn,
}

macro_rules! name_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::invalid(format!("unknown {} `{s}`", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

name_enum!(Norm, Norm::Linf => "linf", Norm::L2 => "l2");
name_enum!(Method, Method::Pgd => "pgd", Method::Fgsm => "fgsm", Method::Ddn => "ddn");

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// `None` derives the step from `epsilon`.
    pub step_alpha: Option<f64>,
    pub t_max: usize,
    pub k_viewpoints: usize,
    pub lambda: f64,
    pub norm: Norm,
    pub method: Method,
    pub param_class: ParamClass,
    pub region: RegionSet,
    pub seed: u64,
    /// Its `base_view` is the reference camera.
    pub viewpoint_dist: ViewpointDistribution,
    pub pose: Pose,
    pub render: RenderOptions,
    pub ddn: DdnParams,
    /// Side of the fixed viewpoint grid used for the final similarity.
    pub eval_grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdnParams {
    pub rho0: f64,
    pub gamma: f64,
    /// Length of the normalized gradient step.
    pub step: f64,
    /// Verification threshold; success means mean similarity below it.
    /// Required by `run_ddn`; the CLI fills it with the calibrated τ when
    /// the config leaves it out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_threshold: Option<f64>,
}

impl Default for DdnParams {
    fn default() -> Self {
        DdnParams {
            rho0: 1.0,
            gamma: 0.05,
            step: 1.0,
            success_threshold: None,
        }
    }
}

impl AttackConfig {
    /// Main configuration: ℓ∞ PGD on DC colors of every primitive, λ = 10,
    /// K = 5, 300 iterations.
    pub fn standard(epsilon: f64, viewpoint_dist: ViewpointDistribution) -> Self {
        AttackConfig {
            epsilon,
            step_alpha: None,
            t_max: 300,
            k_viewpoints: 5,
            lambda: DEFAULT_LAMBDA,
            norm: Norm::Linf,
            method: Method::Pgd,
            param_class: ParamClass::DcColor,
            region: RegionSet::all(),
            seed: 0,
            viewpoint_dist,
            pose: Pose::identity(),
            render: RenderOptions::default(),
            ddn: DdnParams::default(),
            eval_grid: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fixed_budget = self.method != Method::Ddn;
        if fixed_budget && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.t_max == 0 || self.k_viewpoints == 0 {
            return Err(Error::invalid("t_max and k_viewpoints must be at least 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if let Some(a) = self.step_alpha {
            if !(a > 0.0) {
                return Err(Error::invalid("step_alpha must be positive"));
            }
        }
        if self.method == Method::Ddn {
            let d = &self.ddn;
            if !(d.rho0 > 0.0 && (0.0..1.0).contains(&d.gamma) && d.step > 0.0) {
                return Err(Error::invalid("ddn needs rho0 > 0, 0 <= gamma < 1, step > 0"));
            }
        }
        if self.region.is_empty() {
            return Err(Error::invalid("region set is empty"));
        }
        if self.eval_grid == 0 {
            return Err(Error::invalid("eval_grid must be at least 1"));
        }
        self.render.validate()
    }

    pub fn alpha(&self) -> f64 {
        self.step_alpha
            .unwrap_or_else(|| step_size_from_epsilon(self.epsilon))
    }

    /// Iterations actually run; FGSM is single-step.
    pub fn iterations(&self) -> usize {
        if self.method == Method::Fgsm {
            1
        } else {
            self.t_max
        }
    }
}

/// `α = (0.01 / 0.3) · ε`.
pub fn step_size_from_epsilon(epsilon: f64) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    0.01 / 0.3 * epsilon
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{-2sλ})`.
pub fn identity_loss(s: f64, lambda: f64) -> f64 {
    softplus(-2.0 * s * lambda)
}

/// Scalar objective of the similarity; the attack ascends it.
pub trait Objective: Sync {
    /// `(value, d value / ds)`.
    fn eval(&self, s: f64) -> (f64, f64);
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityLoss {
    pub lambda: f64,
}

impl Objective for IdentityLoss {
    fn eval(&self, s: f64) -> (f64, f64) {
        let l = self.lambda;
        (identity_loss(s, l), -2.0 * l * sigmoid(-2.0 * s * l))
    }
}

/// Objective multiplied by a positive constant.
#[derive(Debug, Clone, Copy)]
pub struct Scaled<O>(pub O, pub f64);

impl<O: Objective> Objective for Scaled<O> {
    fn eval(&self, s: f64) -> (f64, f64) {
        let (v, d) = self.0.eval(s);
        (self.1 * v, self.1 * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EotEval {
    pub loss: f64,
    /// Over the tensor's coordinates.
    pub grad: Vec<f64>,
    pub mean_similarity: f64,
    pub similarities: Vec<f64>,
}

/// Mean objective and its gradient over `views`, summed in view order.
#[allow(clippy::too_many_arguments)]
pub fn eot_loss_and_grad(
    scene: &Scene,
    tensor: &ParamTensor,
    views: &[CameraView],
    pose: &Pose,
    embedder: &SurrogateEmbedder,
    reference: &Embedding,
    objective: &dyn Objective,
    opts: &RenderOptions,
) -> Result<EotEval> {
    if views.is_empty() {
        return Err(Error::invalid("no viewpoints"));
    }
    let mut work = scene.clone();
    tensor.write_into(&mut work);
    let per_view: Vec<Result<(f64, f64, Vec<f64>)>> = views
        .par_iter()
        .enumerate()
        .map(|(vi, view)| {
            let run = || -> Result<(f64, f64, Vec<f64>)> {
                let (image, inter) = render(&work, view, pose, opts)?;
                let (_, trace) = embedder.image_forward(&image)?;
                let s = cosine_similarity(&trace.embedding, reference)?;
                let (value, slope) = objective.eval(s);
                let d_emb: Vec<f64> = reference.values.iter().map(|r| slope * r).collect();
                let d_image = embedder.image_backward(&image, &trace, &d_emb);
                let full = render_backward(&work, view, pose, &inter, &d_image, tensor.class)?;
                Ok((value, s, tensor.gather(&full)))
            };
            run().map_err(|e| e.in_view(vi))
        })
        .collect();
    let k = views.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; tensor.len()];
    let mut similarities = Vec::with_capacity(views.len());
    for r in per_view {
        let (value, s, g) = r?;
        loss += value;
        similarities.push(s);
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|v| *v /= k);
    Ok(EotEval {
        loss: loss / k,
        grad,
        mean_similarity: similarities.iter().sum::<f64>() / k,
        similarities,
    })
}

/// Clip into `[θ⁰ − ε, θ⁰ + ε]` elementwise.
pub fn project_linf(theta: &mut [f64], theta0: &[f64], epsilon: f64) {
    for (t, t0) in theta.iter_mut().zip(theta0) {
        *t = t.clamp(t0 - epsilon, t0 + epsilon);
    }
}

/// Radial projection onto the ℓ2 ball of radius `ε` around `θ⁰`.
pub fn project_l2(theta: &mut [f64], theta0: &[f64], epsilon: f64) {
    let n = l2_dist(theta, theta0);
    if n > epsilon {
        let k = epsilon / n;
        for (t, t0) in theta.iter_mut().zip(theta0) {
            *t = t0 + k * (*t - t0);
        }
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Opacity into `[0, 1]`, scales floored, off-unit quaternions renormalized.
/// Color classes are unconstrained. Feasible scenes are returned unchanged.
pub fn apply_param_constraints(scene: &Scene, class: ParamClass) -> Scene {
    let mut out = scene.clone();
    for p in &mut out.primitives {
        match class {
            ParamClass::Opacity => p.opacity = p.opacity.clamp(0.0, 1.0),
            ParamClass::Scale => p.scale = p.scale.map(|s| s.max(SCALE_FLOOR)),
            ParamClass::Rotation => {
                let n = quat_norm(&p.rotation);
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    p.rotation = p.rotation.map(|v| v / n);
                }
            }
            _ => {}
        }
    }
    out
}

/// Box constraints that can be applied to the optimization variable itself
/// without leaving the norm ball (the boxes contain `θ⁰`).
fn clamp_in_place(class: ParamClass, values: &mut [f64]) {
    match class {
        ParamClass::Opacity => values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
        ParamClass::Scale => values.iter_mut().for_each(|v| *v = v.max(SCALE_FLOOR)),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// Mean similarity over this iteration's views, before the update.
    pub s_bar: f64,
    pub loss: f64,
    /// Perturbation norm (ℓ∞ or ℓ2 per config) after the update.
    pub norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Completed,
    NoSuccess,
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
    pub final_values: Vec<f64>,
    pub index_map: Vec<usize>,
    pub status: AttackStatus,
    /// Mean similarity of the returned scene over the fixed evaluation grid.
    pub final_s_bar: f64,
    /// Norm of the returned perturbation in the config's norm.
    pub final_norm: f64,
    pub warnings: Vec<String>,
    /// Excluded from every written artifact.
    pub wall_time_s: f64,
}

impl AttackTrace {
    /// Line-delimited JSON records, one per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn succeeded(&self) -> bool {
        self.status == AttackStatus::Completed
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub scene: Scene,
    pub trace: AttackTrace,
}

/// Mean similarity to `reference` over a fixed `n × n` grid spanning the
/// viewpoint distribution.
pub fn grid_mean_similarity(
    scene: &Scene,
    embedder: &SurrogateEmbedder,
    reference: &Embedding,
    dist: &ViewpointDistribution,
    n: usize,
    pose: &Pose,
    opts: &RenderOptions,
) -> Result<f64> {
    let views = grid_viewpoints(dist, n, n)?;
    let sims: Vec<Result<f64>> = views
        .par_iter()
        .map(|v| {
            let (img, _) = render(scene, v, pose, opts)?;
            cosine_similarity(&embedder.embed_image(&img)?, reference)
        })
        .collect();
    let mut total = 0.0;
    for s in sims {
        total += s?;
    }
    Ok(total / views.len() as f64)
}

struct Setup {
    tensor: ParamTensor,
    reference: Embedding,
    warnings: Vec<String>,
}

fn setup(scene: &Scene, embedder: &SurrogateEmbedder, config: &AttackConfig) -> Result<Setup> {
    config.validate()?;
    scene.validate()?;
    let index_map = select_region(scene, config.region);
    if index_map.is_empty() {
        return Err(Error::invalid(format!("region {} selects no primitives", config.region)));
    }
    let tensor = ParamTensor::from_scene(scene, config.param_class, index_map)?;
    let reference = crate::embedder::reference_embedding(
        embedder,
        scene,
        &config.viewpoint_dist.base_view,
        &config.pose,
        &config.render,
    )?;
    let mut warnings = Vec::new();
    if config.param_class == ParamClass::DcColor && config.method != Method::Ddn {
        let range = scene.dc_range();
        if config.epsilon > range {
            warnings.push(format!("epsilon {} exceeds the DC coefficient range {range}", config.epsilon));
        }
    }
    Ok(Setup {
        tensor,
        reference,
        warnings,
    })
}

fn views_for(config: &AttackConfig, t: usize) -> Vec<CameraView> {
    seeded_angles(&config.viewpoint_dist, config.seed, t as u64, config.k_viewpoints)
        .into_iter()
        .map(|a| config.viewpoint_dist.view(a))
        .collect()
}

fn deviation(config: &AttackConfig, tensor: &ParamTensor) -> f64 {
    match config.norm {
        Norm::Linf => linf_dist(&tensor.values, &tensor.reference),
        Norm::L2 => l2_dist(&tensor.values, &tensor.reference),
    }
}

fn finish(
    scene: &Scene,
    embedder: &SurrogateEmbedder,
    config: &AttackConfig,
    st: Setup,
    tensor: &ParamTensor,
    records: Vec<TraceRecord>,
    status: AttackStatus,
    started: Instant,
) -> Result<AttackOutcome> {
    let mut masked = scene.clone();
    tensor.write_into(&mut masked);
    let masked = apply_param_constraints(&masked, config.param_class);
    let final_s_bar = match status {
        AttackStatus::Aborted(_) => f64::NAN,
        _ => grid_mean_similarity(
            &masked,
            embedder,
            &st.reference,
            &config.viewpoint_dist,
            config.eval_grid,
            &config.pose,
            &config.render,
        )?,
    };
    Ok(AttackOutcome {
        scene: masked,
        trace: AttackTrace {
            records,
            final_values: tensor.values.clone(),
            index_map: tensor.index_map.clone(),
            status,
            final_s_bar,
            final_norm: deviation(config, tensor),
            warnings: st.warnings,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    })
}

fn check_grad(grad: &[f64]) -> Option<String> {
    grad.iter()
        .position(|g| !g.is_finite())
        .map(|i| format!("non-finite gradient at coordinate {i}"))
}

/// Runs the configured method.
pub fn run_attack(scene: &Scene, embedder: &SurrogateEmbedder, config: &AttackConfig) -> Result<AttackOutcome> {
    match config.method {
        Method::Pgd => run_pgd(scene, embedder, config),
        Method::Fgsm => run_fgsm(scene, embedder, config),
        Method::Ddn => run_ddn(scene, embedder, config),
    }
}

pub fn run_pgd(scene: &Scene, embedder: &SurrogateEmbedder, config: &AttackConfig) -> Result<AttackOutcome> {
    run_pgd_with(scene, embedder, config, &IdentityLoss { lambda: config.lambda })
}

/// PGD with a caller-supplied objective.
pub fn run_pgd_with(
    scene: &Scene,
    embedder: &SurrogateEmbedder,
    config: &AttackConfig,
    objective: &dyn Objective,
) -> Result<AttackOutcome> {
    let started = Instant::now();
    let st = setup(scene, embedder, config)?;
    let mut tensor = st.tensor.clone();
    let alpha = config.alpha();
    let single_step = config.method == Method::Fgsm;
    let mut records = Vec::with_capacity(config.iterations());
    let mut status = AttackStatus::Completed;
    for t in 1..=config.iterations() {
        let views = views_for(config, t);
        let eval = match eot_loss_and_grad(
            scene,
            &tensor,
            &views,
            &config.pose,
            embedder,
            &st.reference,
            objective,
            &config.render,
        ) {
            Ok(e) => e,
            Err(e) => {
                status = AttackStatus::Aborted(format!("iteration {t}: {e}"));
                break;
            }
        };
        if let Some(msg) = check_grad(&eval.grad) {
            status = AttackStatus::Aborted(format!("iteration {t}: {msg}"));
            break;
        }
        let (step, base): (f64, Vec<f64>) = if single_step {
            (config.epsilon, tensor.reference.clone())
        } else {
            (alpha, tensor.values.clone())
        };
        let mut next = base;
        match config.norm {
            Norm::Linf => {
                for (v, g) in next.iter_mut().zip(&eval.grad) {
                    *v += step * sign(*g);
                }
                project_linf(&mut next, &tensor.reference, config.epsilon);
            }
            Norm::L2 => {
                let gn = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if gn > 0.0 {
                    for (v, g) in next.iter_mut().zip(&eval.grad) {
                        *v += step * g / gn;
                    }
                }
                project_l2(&mut next, &tensor.reference, config.epsilon);
            }
        }
        clamp_in_place(config.param_class, &mut next);
        tensor.values = next;
        records.push(TraceRecord {
            t,
            s_bar: eval.mean_similarity,
            loss: eval.loss,
            norm: deviation(config, &tensor),
            rho: None,
            success: None,
        });
    }
    finish(scene, embedder, config, st, &tensor, records, status, started)
}

/// Single signed (ℓ∞) or normalized (ℓ2) step of length ε from θ⁰.
pub fn run_fgsm(scene: &Scene, embedder: &SurrogateEmbedder, config: &AttackConfig) -> Result<AttackOutcome> {
    let config = AttackConfig {
        method: Method::Fgsm,
        t_max: 1,
        ..config.clone()
    };
    run_pgd(scene, embedder, &config)
}

/// Decoupled direction and norm: the radius shrinks after a successful
/// iterate and grows otherwise; the smallest successful perturbation wins.
pub fn run_ddn(scene: &Scene, embedder: &SurrogateEmbedder, config: &AttackConfig) -> Result<AttackOutcome> {
    let started = Instant::now();
    let config = AttackConfig {
        method: Method::Ddn,
        norm: Norm::L2,
        ..config.clone()
    };
    let p = config.ddn;
    let threshold = p
        .success_threshold
        .ok_or_else(|| Error::invalid("ddn needs a success threshold"))?;
    let st = setup(scene, embedder, &config)?;
    let objective = IdentityLoss { lambda: config.lambda };
    let mut tensor = st.tensor.clone();
    let mut rho = p.rho0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut records = Vec::with_capacity(config.t_max);
    let mut aborted = None;

    let consider = |best: &mut Option<(f64, Vec<f64>)>, success: bool, values: &[f64], norm: f64| {
        if success && best.as_ref().is_none_or(|(n, _)| norm < *n) {
            *best = Some((norm, values.to_vec()));
        }
    };

    for t in 1..=config.t_max + 1 {
        let views = views_for(&config, t);
        let eval = match eot_loss_and_grad(
            scene,
            &tensor,
            &views,
            &config.pose,
            embedder,
            &st.reference,
            &objective,
            &config.render,
        ) {
            Ok(e) => e,
            Err(e) => {
                aborted = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        let success = eval.mean_similarity < threshold;
        let current_norm = l2_dist(&tensor.values, &tensor.reference);
        consider(&mut best, success, &tensor.values, current_norm);
        if t > config.t_max {
            // evaluation of the last iterate only
            break;
        }
        if let Some(msg) = check_grad(&eval.grad) {
            aborted = Some(format!("iteration {t}: {msg}"));
            break;
        }
        rho *= if success { 1.0 - p.gamma } else { 1.0 + p.gamma };
        let gn = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut delta: Vec<f64> = tensor.values.iter().zip(&tensor.reference).map(|(v, r)| v - r).collect();
        if gn > 0.0 {
            for (d, g) in delta.iter_mut().zip(&eval.grad) {
                *d += p.step * g / gn;
            }
        }
        let dn = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dn > 0.0 {
            delta.iter_mut().for_each(|d| *d *= rho / dn);
        }
        let mut next: Vec<f64> = tensor.reference.iter().zip(&delta).map(|(r, d)| r + d).collect();
        clamp_in_place(config.param_class, &mut next);
        tensor.values = next;
        records.push(TraceRecord {
            t,
            s_bar: eval.mean_similarity,
            loss: eval.loss,
            norm: l2_dist(&tensor.values, &tensor.reference),
            rho: Some(rho),
            success: Some(success),
        });
    }

    let status = match (&aborted, &best) {
        (Some(msg), _) => AttackStatus::Aborted(msg.clone()),
        (None, Some(_)) => AttackStatus::Completed,
        (None, None) => AttackStatus::NoSuccess,
    };
    match (&status, best) {
        (AttackStatus::Completed, Some((_, values))) => tensor.values = values,
        (AttackStatus::NoSuccess, _) => tensor.values = tensor.reference.clone(),
        _ => {}
    }
    finish(scene, embedder, &config, st, &tensor, records, status, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::default_frontal;
    use crate::embedder::Architecture;
    use crate::scene::{synth_scene, Layout};
    use proptest::prelude::*;

    #[test]
    fn step_size_rule() {
        assert!((step_size_from_epsilon(0.3) - 0.01).abs() < 1e-17);
        assert!((step_size_from_epsilon(0.1) - 0.01 / 3.0).abs() < 1e-17);
    }

    #[test]
    #[should_panic]
    fn zero_epsilon_step_rejected() {
        step_size_from_epsilon(0.0);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((identity_loss(0.0, 10.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((identity_loss(1.0, 10.0) - 2.061_153_620_314_381e-9).abs() < 1e-20);
        assert!((identity_loss(-1.0, 10.0) - 20.000_000_002_061_153).abs() < 1e-12);
    }

    #[test]
    fn loss_slope_matches_difference_quotient() {
        let o = IdentityLoss { lambda: 10.0 };
        for s in [-0.9, -0.2, 0.0, 0.3, 0.95] {
            let h = 1e-6;
            let fd = (o.eval(s + h).0 - o.eval(s - h).0) / (2.0 * h);
            assert!((fd - o.eval(s).1).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn linf_projection() {
        let mut t = vec![0.75];
        project_linf(&mut t, &[0.5], 0.1);
        assert_eq!(t, vec![0.6]);
        let mut inside = vec![0.55, 0.45];
        project_linf(&mut inside, &[0.5, 0.5], 0.1);
        assert_eq!(inside, vec![0.55, 0.45]);
    }

    #[test]
    fn l2_projection() {
        let mut t = vec![3.0, 4.0, 0.0];
        project_l2(&mut t, &[0.0; 3], 10.0);
        assert_eq!(t, vec![3.0, 4.0, 0.0]);
        let mut t = vec![20.0, 0.0];
        project_l2(&mut t, &[0.0; 2], 10.0);
        assert_eq!(t, vec![10.0, 0.0]);
    }

    #[test]
    fn constraints() {
        let mut scene = synth_scene(1, 3, Layout::Blob).unwrap();
        assert_eq!(apply_param_constraints(&scene, ParamClass::Rotation), scene);
        assert_eq!(apply_param_constraints(&scene, ParamClass::Opacity), scene);
        scene.primitives[0].opacity = 1.3;
        scene.primitives[1].rotation = scene.primitives[1].rotation.map(|v| 0.8 * v);
        scene.primitives[2].scale[1] = -0.5;
        let o = apply_param_constraints(&scene, ParamClass::Opacity);
        assert_eq!(o.primitives[0].opacity, 1.0);
        let r = apply_param_constraints(&scene, ParamClass::Rotation);
        assert!((quat_norm(&r.primitives[1].rotation) - 1.0).abs() < 1e-12);
        let s = apply_param_constraints(&scene, ParamClass::Scale);
        assert_eq!(s.primitives[2].scale[1], SCALE_FLOOR);
    }

    proptest! {
        #[test]
        fn loss_strictly_decreasing(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            prop_assume!(a < b);
            // λ small enough that both values stay distinguishable in f64
            prop_assert!(identity_loss(a, 1.0) > identity_loss(b, 1.0));
            let slope = IdentityLoss { lambda: 10.0 }.eval(a).1;
            prop_assert!(slope < 0.0);
        }

        #[test]
        fn projections_are_idempotent(
            t in prop::collection::vec(-3.0f64..3.0, 1..20),
            eps in 0.01f64..2.0,
        ) {
            let t0 = vec![0.0; t.len()];
            let mut a = t.clone();
            project_linf(&mut a, &t0, eps);
            let mut b = a.clone();
            project_linf(&mut b, &t0, eps);
            prop_assert_eq!(&a, &b);
            let mut c = t.clone();
            project_l2(&mut c, &t0, eps);
            let n = l2_dist(&c, &t0);
            prop_assert!((n - l2_dist(&t, &t0).min(eps)).abs() < 1e-12);
            let mut d = c.clone();
            project_l2(&mut d, &t0, eps);
            prop_assert!(l2_dist(&c, &d) < 1e-15);
        }
    }

    fn small_setup() -> (Scene, SurrogateEmbedder, AttackConfig) {
        let scene = synth_scene(21, 40, Layout::HeadLike).unwrap();
        let emb = SurrogateEmbedder::new(5, Architecture::A);
        let dist = ViewpointDistribution::symmetric(0.5, default_frontal(32, 32).unwrap()).unwrap();
        let mut cfg = AttackConfig::standard(0.1, dist);
        cfg.t_max = 3;
        cfg.k_viewpoints = 2;
        (scene, emb, cfg)
    }

    #[test]
    fn duplicated_views_average_to_single() {
        let (scene, emb, cfg) = small_setup();
        let st = setup(&scene, &emb, &cfg).unwrap();
        let v = views_for(&cfg, 1).remove(0);
        let o = IdentityLoss { lambda: 10.0 };
        let one = eot_loss_and_grad(&scene, &st.tensor, &[v.clone()], &cfg.pose, &emb, &st.reference, &o, &cfg.render).unwrap();
        let two = eot_loss_and_grad(&scene, &st.tensor, &[v.clone(), v], &cfg.pose, &emb, &st.reference, &o, &cfg.render).unwrap();
        assert_eq!(one.loss, two.loss);
        assert_eq!(one.grad, two.grad);
    }

    #[test]
    fn fgsm_saturates_every_active_coordinate() {
        let (scene, emb, cfg) = small_setup();
        let out = run_fgsm(&scene, &emb, &cfg).unwrap();
        assert_eq!(out.trace.records.len(), 1);
        let st = setup(&scene, &emb, &cfg).unwrap();
        let views = views_for(&cfg, 1);
        let g = eot_loss_and_grad(&scene, &st.tensor, &views, &cfg.pose, &emb, &st.reference, &IdentityLoss { lambda: 10.0 }, &cfg.render)
            .unwrap()
            .grad;
        for ((v, r), g) in out.trace.final_values.iter().zip(&st.tensor.reference).zip(&g) {
            if *g != 0.0 {
                assert!(((v - r).abs() - 0.1).abs() < 1e-15);
            } else {
                assert_eq!(v, r);
            }
        }
        let l2 = AttackConfig { norm: Norm::L2, epsilon: 2.0, ..cfg };
        let out = run_fgsm(&scene, &emb, &l2).unwrap();
        assert!((out.trace.final_norm - 2.0).abs() < 1e-9);
    }

    #[test]
    fn vanishing_budget_keeps_scene() {
        let (scene, emb, cfg) = small_setup();
        let cfg = AttackConfig { epsilon: 1e-12, ..cfg };
        let out = run_pgd(&scene, &emb, &cfg).unwrap();
        for (a, b) in scene.primitives.iter().zip(&out.scene.primitives) {
            for k in 0..3 {
                assert!((a.sh_dc[k] - b.sh_dc[k]).abs() <= 1e-12);
            }
        }
        let st = setup(&scene, &emb, &cfg).unwrap();
        let before = grid_mean_similarity(&scene, &emb, &st.reference, &cfg.viewpoint_dist, 3, &cfg.pose, &cfg.render).unwrap();
        assert!((before - out.trace.final_s_bar).abs() < 1e-6);
    }

    #[test]
    fn loss_scale_leaves_linf_trajectory_unchanged() {
        let (scene, emb, cfg) = small_setup();
        let o = IdentityLoss { lambda: cfg.lambda };
        let a = run_pgd_with(&scene, &emb, &cfg, &o).unwrap();
        let b = run_pgd_with(&scene, &emb, &cfg, &Scaled(o, 10.0)).unwrap();
        assert_eq!(a.trace.final_values, b.trace.final_values);
        assert_eq!(a.scene, b.scene);
    }

    #[test]
    fn ddn_with_zero_gamma_keeps_radius() {
        let (scene, emb, cfg) = small_setup();
        let cfg = AttackConfig {
            method: Method::Ddn,
            ddn: DdnParams { gamma: 0.0, success_threshold: Some(-2.0), ..DdnParams::default() },
            ..cfg
        };
        let out = run_ddn(&scene, &emb, &cfg).unwrap();
        assert!(out.trace.records.iter().all(|r| r.rho == Some(1.0)));
        // threshold below -1 can never be met
        assert_eq!(out.trace.status, AttackStatus::NoSuccess);
        assert_eq!(out.scene, scene);
    }

    #[test]
    fn trace_lines_parse_back() {
        let (scene, emb, cfg) = small_setup();
        let out = run_pgd(&scene, &emb, &cfg).unwrap();
        let lines: Vec<TraceRecord> = out
            .trace
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.trace.records);
        assert_eq!(lines.len(), 3);
    }
}
