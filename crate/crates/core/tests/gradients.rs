//! Analytic gradients against central finite differences, for the renderer
//! alone and for the whole render → align → embed → cosine → loss chain.

use splatmask::attack::{eot_loss_and_grad, IdentityLoss, Objective};
use splatmask::camera::{default_frontal, rotate_view, CameraView, Pose};
use splatmask::embedder::{cosine_similarity, reference_embedding, Architecture, SurrogateEmbedder};
use splatmask::renderer::{fd_gradient_masked, fd_step, render, render_backward, Image, ParamClass, RenderOptions};
use splatmask::scene::{synth_scene, Layout, ParamTensor, Scene};

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (((i * 7919) % 1009) as f64 / 1009.0) - 0.5).collect()
}

fn weighted_sum(w: &[f64]) -> impl Fn(&Image) -> f64 + '_ {
    move |img: &Image| img.pixels.iter().zip(w).map(|(p, q)| p * q).sum::<f64>()
}

/// Blob scene with two SH bands and nonzero band-1 coefficients.
fn banded_fixture() -> Scene {
    let mut s = synth_scene(17, 20, Layout::Blob).unwrap().with_sh_bands(2).unwrap();
    for (i, p) in s.primitives.iter_mut().enumerate() {
        for (k, c) in p.sh_rest.iter_mut().enumerate() {
            *c = [0.1 * ((i + k) as f64).sin(), -0.05, 0.08 * (k as f64 - 1.0)];
        }
    }
    s
}

/// Relative error with the denominator floored at `floor_frac` of the
/// largest finite-difference component, so that O(h²) truncation on
/// components far below the class scale does not read as a mismatch.
/// `floor_frac = 0` is the strict per-coordinate definition.
struct ClassReport {
    worst: f64,
    checked: usize,
    total: usize,
}

fn check_class(
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    opts: &RenderOptions,
    class: ParamClass,
    floor_frac: f64,
) -> ClassReport {
    let w = weights(3 * view.width * view.height);
    let (_, inter) = render(scene, view, pose, opts).unwrap();
    let analytic = render_backward(scene, view, pose, &inter, &w, class).unwrap();
    let (fd, smooth) = fd_gradient_masked(scene, view, pose, opts, &weighted_sum(&w), class, 1e-4).unwrap();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_frac * scale).max(1e-8);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..fd.len() {
        if smooth[i] {
            checked += 1;
            worst = worst.max((analytic[i] - fd[i]).abs() / fd[i].abs().max(floor));
        }
    }
    ClassReport { worst, checked, total: fd.len() }
}

#[test]
fn every_class_matches_under_pose_and_view_dependence() {
    let scene = banded_fixture();
    let view = rotate_view(&default_frontal(32, 32).unwrap(), 0.1, -0.2);
    let (s, c) = (0.05f64.sin(), 0.05f64.cos());
    let pose = Pose::new([c, 0.0, s, 0.0], [0.05, 0.0, -0.1]).unwrap();
    let opts = RenderOptions { view_dependent: true, ..RenderOptions::default() };
    for class in ParamClass::ALL {
        let r = check_class(&scene, &view, &pose, &opts, class, 1e-2);
        assert!(r.worst < 1e-4, "{class}: {}", r.worst);
        assert!(r.checked * 5 >= r.total * 4, "{class}: only {}/{} smooth", r.checked, r.total);
    }
}

#[test]
fn head_scene_matches_at_frontal_view() {
    let scene = synth_scene(3, 20, Layout::HeadLike).unwrap();
    let view = default_frontal(32, 32).unwrap();
    for class in ParamClass::ALL.into_iter().filter(|c| *c != ParamClass::AcColor) {
        let r = check_class(&scene, &view, &Pose::identity(), &RenderOptions::default(), class, 0.0);
        assert!(r.worst < 1e-4, "{class}: {}", r.worst);
    }
}

/// Full chain at 48×48 with K = 2 viewpoints on a 5-primitive scene.
#[test]
fn eot_gradient_matches_finite_differences() {
    let scene = synth_scene(8, 5, Layout::HeadLike).unwrap();
    let base = default_frontal(48, 48).unwrap();
    let views = vec![rotate_view(&base, 0.1, 0.2), rotate_view(&base, -0.2, -0.1)];
    let emb = SurrogateEmbedder::new(2, Architecture::A);
    let opts = RenderOptions::default();
    let other = synth_scene(9, 40, Layout::HeadLike).unwrap();
    let reference = reference_embedding(&emb, &other, &base, &Pose::identity(), &opts).unwrap();
    let objective = IdentityLoss { lambda: 10.0 };
    let tensor = ParamTensor::dc(&scene, (0..scene.len()).collect()).unwrap();
    let eval = eot_loss_and_grad(&scene, &tensor, &views, &Pose::identity(), &emb, &reference, &objective, &opts).unwrap();

    let loss_at = |t: &ParamTensor| {
        let mut s = scene.clone();
        t.write_into(&mut s);
        views
            .iter()
            .map(|v| {
                let (img, _) = render(&s, v, &Pose::identity(), &opts).unwrap();
                let e = emb.embed_image(&img).unwrap();
                objective.eval(cosine_similarity(&e, &reference).unwrap()).0
            })
            .sum::<f64>()
            / views.len() as f64
    };
    assert!((loss_at(&tensor) - eval.loss).abs() < 1e-12);
    for i in 0..tensor.len() {
        let h = fd_step(tensor.values[i], 1e-4);
        let mut p = tensor.clone();
        let mut m = tensor.clone();
        p.values[i] += h;
        m.values[i] -= h;
        let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
        let rel = (eval.grad[i] - fd).abs() / (fd.abs() + 1e-8);
        assert!(rel < 1e-3, "coordinate {i}: analytic {} fd {fd}", eval.grad[i]);
    }
}

/// Render → align → embed → cosine on a 10-primitive scene at 64×64.
#[test]
fn similarity_gradient_matches_at_64px() {
    let scene = synth_scene(12, 10, Layout::HeadLike).unwrap();
    let view = default_frontal(64, 64).unwrap();
    let emb = SurrogateEmbedder::new(4, Architecture::B);
    let opts = RenderOptions::default();
    let reference = reference_embedding(&emb, &synth_scene(13, 60, Layout::HeadLike).unwrap(), &view, &Pose::identity(), &opts).unwrap();
    let sim = |s: &Scene| {
        let (img, _) = render(s, &view, &Pose::identity(), &opts).unwrap();
        cosine_similarity(&emb.embed_image(&img).unwrap(), &reference).unwrap()
    };
    let (img, inter) = render(&scene, &view, &Pose::identity(), &opts).unwrap();
    let (_, trace) = emb.image_forward(&img).unwrap();
    let d_image = emb.image_backward(&img, &trace, &reference.values);
    let analytic = render_backward(&scene, &view, &Pose::identity(), &inter, &d_image, ParamClass::DcColor).unwrap();
    let tensor = ParamTensor::dc(&scene, (0..scene.len()).collect()).unwrap();
    for i in 0..tensor.len() {
        let h = fd_step(tensor.values[i], 1e-4);
        let (mut p, mut m) = (scene.clone(), scene.clone());
        let (mut tp, mut tm) = (tensor.clone(), tensor.clone());
        tp.values[i] += h;
        tm.values[i] -= h;
        tp.write_into(&mut p);
        tm.write_into(&mut m);
        let fd = (sim(&p) - sim(&m)) / (2.0 * h);
        assert!((analytic[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-3, "{i}: {} vs {fd}", analytic[i]);
    }
}
