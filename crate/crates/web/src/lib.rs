//! Browser bindings: one synthetic head, its masked copy, and the three
//! views the page draws (a render, a mask run, a rotation heatmap).

use wasm_bindgen::prelude::*;

use splatmask::attack::{run_attack, AttackConfig};
use splatmask::camera::{default_frontal, Angles, Pose, ViewpointDistribution};
use splatmask::embedder::{cosine_similarity, reference_embedding, Architecture, Embedding, SurrogateEmbedder};
use splatmask::eval::{build_synthetic_protocol, calibrate_eer, rotation_grid_report, ProtocolSpec};
use splatmask::renderer::{render, Image, RenderOptions};
use splatmask::scene::{synth_scene, Layout, Scene};

/// Side of every render the page shows.
const SIDE: usize = 64;
const PRIMITIVES: usize = 400;
const EOT_RANGE: f64 = 0.5;

fn js_err(e: splatmask::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.width * img.height * 4);
    for px in img.pixels.chunks_exact(3) {
        for &v in px {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    original: Scene,
    masked: Scene,
    embedder: SurrogateEmbedder,
    reference: Embedding,
    dist: ViewpointDistribution,
    opts: RenderOptions,
    tau: f64,
    seed: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Builds identity `seed` and calibrates the match threshold on a small
    /// synthetic protocol that starts at the same seed.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        let seed = u64::from(seed);
        let opts = RenderOptions::default();
        let embedder = SurrogateEmbedder::new(7, Architecture::A);
        let original = synth_scene(seed, PRIMITIVES, Layout::HeadLike).map_err(js_err)?;
        let base = default_frontal(SIDE, SIDE).map_err(js_err)?;
        let dist = ViewpointDistribution::symmetric(EOT_RANGE, base.clone()).map_err(js_err)?;
        let reference = reference_embedding(&embedder, &original, &base, &Pose::identity(), &opts).map_err(js_err)?;
        let spec = ProtocolSpec {
            seed,
            identities: 5,
            views: 6,
            primitives: PRIMITIVES,
            width: SIDE,
            height: SIDE,
            ..ProtocolSpec::default()
        };
        let protocol = build_synthetic_protocol(&spec, &embedder, &opts).map_err(js_err)?;
        let tau = calibrate_eer(&protocol.pairs).map_err(js_err)?.tau;
        Ok(Demo {
            masked: original.clone(),
            original,
            embedder,
            reference,
            dist,
            opts,
            tau,
            seed,
        })
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// RGBA bytes of the original or masked head at `(pitch, yaw)`.
    pub fn render(&self, pitch: f64, yaw: f64, masked: bool) -> Result<Vec<u8>, JsError> {
        let scene = if masked { &self.masked } else { &self.original };
        let view = self.dist.view(Angles { pitch, yaw });
        let (img, _) = render(scene, &view, &Pose::identity(), &self.opts).map_err(js_err)?;
        Ok(rgba(&img))
    }

    /// Cosine similarity of a view to the frontal reference.
    pub fn similarity(&self, pitch: f64, yaw: f64, masked: bool) -> Result<f64, JsError> {
        let scene = if masked { &self.masked } else { &self.original };
        let view = self.dist.view(Angles { pitch, yaw });
        let (img, _) = render(scene, &view, &Pose::identity(), &self.opts).map_err(js_err)?;
        let e = self.embedder.embed_image(&img).map_err(js_err)?;
        cosine_similarity(&e, &self.reference).map_err(js_err)
    }

    /// Runs ℓ∞ PGD on the DC colors with budget `epsilon` for `iterations`
    /// steps, replacing the masked scene. Returns the final mean similarity.
    pub fn mask(&mut self, epsilon: f64, iterations: usize) -> Result<f64, JsError> {
        let mut config = AttackConfig::standard(epsilon, self.dist.clone());
        config.t_max = iterations.max(1);
        config.seed = self.seed;
        let outcome = run_attack(&self.original, &self.embedder, &config).map_err(js_err)?;
        self.masked = outcome.scene;
        Ok(outcome.trace.final_s_bar)
    }

    pub fn reset(&mut self) {
        self.masked = self.original.clone();
    }

    /// Row-major `n × n` similarities over `[-range, range]` in pitch (rows)
    /// and yaw (columns): masked cells first, then the original's.
    pub fn rotation_grid(&self, n: usize, range: f64) -> Result<Vec<f64>, JsError> {
        let dist = ViewpointDistribution::symmetric(range, self.dist.base_view.clone()).map_err(js_err)?;
        let report = rotation_grid_report(
            &self.masked,
            &self.original,
            &self.embedder,
            std::slice::from_ref(&self.reference),
            &dist,
            n,
            n,
            self.tau,
            &self.opts,
        )
        .map_err(js_err)?;
        let masked = report.cells.iter().map(|c| c.similarity);
        Ok(masked.chain(report.cells.iter().map(|c| c.original_similarity)).collect())
    }
}
