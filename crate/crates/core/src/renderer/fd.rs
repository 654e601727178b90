use crate::camera::{CameraView, Pose};
use crate::error::{Error, Result};
use crate::scene::Scene;

use super::{render, Image, ParamClass, RenderOptions};

/// Central-difference step for a coordinate: `h` relative, absolute below 1.
pub fn fd_step(theta: f64, h: f64) -> f64 {
    h * theta.abs().max(1.0)
}

/// Central finite-difference gradient of `loss(render(scene))` with respect
/// to every parameter of `class`.
pub fn fd_gradient(
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    opts: &RenderOptions,
    loss: &dyn Fn(&Image) -> f64,
    class: ParamClass,
    h: f64,
) -> Result<Vec<f64>> {
    Ok(fd_gradient_masked(scene, view, pose, opts, loss, class, h)?.0)
}

/// As [`fd_gradient`], plus a per-coordinate flag that is `false` when either
/// stencil point crosses a cull, cap, clamp or support boundary, where the
/// central difference does not estimate the one-sided derivative.
pub fn fd_gradient_masked(
    scene: &Scene,
    view: &CameraView,
    pose: &Pose,
    opts: &RenderOptions,
    loss: &dyn Fn(&Image) -> f64,
    class: ParamClass,
    h: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let base = render(scene, view, pose, opts)?.1.signature();
    let width = class.width(scene.sh_bands);
    let mut grad = Vec::with_capacity(scene.len() * width);
    let mut smooth = Vec::with_capacity(scene.len() * width);
    let mut work = scene.clone();
    for i in 0..scene.len() {
        let original = class.read(&scene.primitives[i]);
        for k in 0..width {
            let step = fd_step(original[k], h);
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                let mut v = original.clone();
                v[k] += delta;
                class.write(&mut work.primitives[i], &v);
                let (img, inter) = render(&work, view, pose, opts)?;
                Ok((loss(&img), inter.signature()))
            };
            let (lp, sp) = eval(step)?;
            let (lm, sm) = eval(-step)?;
            class.write(&mut work.primitives[i], &original);
            grad.push((lp - lm) / (2.0 * step));
            smooth.push(sp == base && sm == base);
        }
    }
    Ok((grad, smooth))
}
