//! Identification and verification metrics, image fidelity metrics, the
//! synthetic gallery protocol and the rotation-grid persistence report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{grid_angles, rotate_view, Angles, CameraView, Pose, ViewpointDistribution};
use crate::embedder::{align, Embedding, SurrogateEmbedder, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::renderer::{render, Image, RenderOptions};
use crate::rng::substream;
use crate::scene::{synth_scene, Layout, Scene};

/// Unit-norm tolerance accepted for gallery and query embeddings.
const UNIT_SLACK: f64 = 1e-6;
/// A unit vector dotted with itself can round to 1 − ulp; verdicts allow
/// this much below τ so a self-comparison matches at τ = 1.
pub const MATCH_SLACK: f64 = 1e-12;

fn dot(a: &Embedding, b: &Embedding) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// `1 − cos(q, g)` for unit-norm inputs, in `[0, 2]`.
pub fn cosine_distance(q: &Embedding, g: &Embedding) -> f64 {
    1.0 - dot(q, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub id: String,
    pub embedding: Embedding,
}

/// Labeled reference embeddings with an id → positions index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    index: BTreeMap<String, Vec<usize>>,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        let mut g = Gallery::default();
        for e in entries {
            g.push(e)?;
        }
        Ok(g)
    }

    pub fn push(&mut self, entry: GalleryEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.embedding.dim() != entry.embedding.dim() {
                return Err(Error::invalid(format!(
                    "gallery entry `{}` has dimension {}, expected {}",
                    entry.id,
                    entry.embedding.dim(),
                    first.embedding.dim()
                )));
            }
        }
        if (entry.embedding.norm() - 1.0).abs() > UNIT_SLACK {
            return Err(Error::invalid(format!("gallery entry `{}` is not unit norm", entry.id)));
        }
        self.index.entry(entry.id.clone()).or_default().push(self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry positions of `id`, in insertion order.
    pub fn positions(&self, id: &str) -> Option<&[usize]> {
        self.index.get(id).map(Vec::as_slice)
    }

    pub fn identity_count(&self) -> usize {
        self.index.len()
    }

    /// Embeddings of one identity.
    pub fn references(&self, id: &str) -> Result<Vec<&Embedding>> {
        let pos = self
            .positions(id)
            .ok_or_else(|| Error::invalid(format!("identity `{id}` has no gallery references")))?;
        Ok(pos.iter().map(|&i| &self.entries[i].embedding).collect())
    }

    /// Binary layout, all little-endian: `u32 count`, `u32 dim`, then per
    /// entry `u32 id_len`, the UTF-8 id, and `dim` f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.entries.first().map_or(EMBEDDING_DIM, |e| e.embedding.dim());
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            for v in &e.embedding.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`Gallery::to_bytes`]; embeddings are renormalized after the
    /// f32 round trip.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut u32_at = |what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::invalid(format!("gallery file truncated in {what}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let count = u32_at("header")? as usize;
        let dim = u32_at("header")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut rest = &bytes[8..];
        for i in 0..count {
            let take = |rest: &mut &[u8], n: usize| -> Result<Vec<u8>> {
                if rest.len() < n {
                    return Err(Error::invalid(format!("gallery file truncated in entry {i}")));
                }
                let (head, tail) = rest.split_at(n);
                *rest = tail;
                Ok(head.to_vec())
            };
            let len = u32::from_le_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(&mut rest, len)?)
                .map_err(|_| Error::invalid(format!("gallery entry {i}: id is not UTF-8")))?;
            let raw = take(&mut rest, 4 * dim)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            entries.push(GalleryEntry {
                id,
                embedding: Embedding::normalized(values)?,
            });
        }
        if !rest.is_empty() {
            return Err(Error::invalid("trailing bytes after gallery entries"));
        }
        Gallery::new(entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Gallery::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorePairs {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// 1-based rank of the first `true_id` entry after a stable sort of the
/// gallery by ascending distance to `query`.
pub fn rank_of(query: &Embedding, true_id: &str, gallery: &Gallery) -> Result<usize> {
    let targets = gallery
        .positions(true_id)
        .ok_or_else(|| Error::invalid(format!("identity `{true_id}` is not in the gallery")))?;
    let dist: Vec<f64> = gallery.entries.iter().map(|e| cosine_distance(query, &e.embedding)).collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    let first = order.iter().position(|i| targets.contains(i)).expect("id has entries");
    Ok(first + 1)
}

/// Ranks of every query, in query order.
pub fn ranks(queries: &[(Embedding, String)], gallery: &Gallery) -> Result<Vec<usize>> {
    queries.par_iter().map(|(q, id)| rank_of(q, id, gallery)).collect()
}

fn rate(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Fraction of queries whose true identity ranks within the top `k`.
pub fn accuracy_at_k(queries: &[(Embedding, String)], gallery: &Gallery, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    Ok(rate(&ranks(queries, gallery)?, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub eer: f64,
}

/// Empirical error rates at `tau`: FAR counts negatives `≥ tau`, FRR counts
/// positives `< tau`. Both inputs must be sorted ascending.
pub fn error_rates(sorted_pos: &[f64], sorted_neg: &[f64], tau: f64) -> (f64, f64) {
    let far = (sorted_neg.len() - sorted_neg.partition_point(|&s| s < tau)) as f64 / sorted_neg.len() as f64;
    let frr = sorted_pos.partition_point(|&s| s < tau) as f64 / sorted_pos.len() as f64;
    (far, frr)
}

/// Equal-error-rate threshold.
///
/// Candidates are the distinct scores. FAR − FRR is non-increasing along
/// them; the lowest candidate where it is exactly zero wins. Otherwise both
/// curves are interpolated linearly across the sign change and τ, EER are
/// read at the crossing. A threshold above every score (FAR 0, FRR 1) closes
/// the sweep so a crossing always exists.
pub fn calibrate_eer(pairs: &ScorePairs) -> Result<Calibration> {
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return Err(Error::invalid("calibration needs positive and negative pairs"));
    }
    if pairs.positives.iter().chain(&pairs.negatives).any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let mut pos = pairs.positives.clone();
    let mut neg = pairs.negatives.clone();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    if cands.len() == 1 {
        let (far, frr) = error_rates(&pos, &neg, cands[0]);
        return Ok(Calibration {
            tau: cands[0],
            eer: 0.5 * (far + frr),
        });
    }
    let curve: Vec<(f64, f64, f64)> = cands
        .iter()
        .map(|&t| {
            let (far, frr) = error_rates(&pos, &neg, t);
            (t, far, frr)
        })
        .chain(std::iter::once((*cands.last().unwrap(), 0.0, 1.0)))
        .collect();
    for w in curve.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok(Calibration { tau: t0, eer: far0 });
        }
        if d1 < 0.0 {
            let s = d0 / (d0 - d1);
            return Ok(Calibration {
                tau: t0 + s * (t1 - t0),
                eer: far0 + s * (far1 - far0),
            });
        }
    }
    unreachable!("the closing candidate has FAR − FRR = −1")
}

/// Fraction of queries whose best same-identity reference reaches `tau`.
pub fn match_rate(masked: &[(Embedding, String)], references: &Gallery, tau: f64) -> Result<f64> {
    if masked.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut hits = 0usize;
    for (q, id) in masked {
        let best = references
            .references(id)?
            .into_iter()
            .map(|r| dot(q, r))
            .fold(f64::NEG_INFINITY, f64::max);
        hits += usize::from(Verdict::of(best, tau) == Verdict::Match);
    }
    Ok(hits as f64 / masked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    /// Odd window side; shrunk to fit images smaller than the window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Valid-mode separable filter of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| kernel[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| kernel[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with a Gaussian window, averaged over valid window
/// positions and over the three channels.
pub fn ssim_with(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    if params.window == 0 || params.window % 2 == 0 || !(params.sigma > 0.0) {
        return Err(Error::invalid("SSIM window must be odd and sigma positive"));
    }
    let side = a.width.min(a.height);
    let n = if params.window <= side { params.window } else { side - (1 - side % 2) };
    let half = (n / 2) as f64;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|k| k / total).collect();
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (w, h) = (a.width, a.height);
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.pixels[3 * i + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.pixels[3 * i + c]).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let ma = filter_valid(&pa, w, h, &kernel);
        let mb = filter_valid(&pb, w, h, &kernel);
        let saa = filter_valid(&aa, w, h, &kernel);
        let sbb = filter_valid(&bb, w, h, &kernel);
        let sab = filter_valid(&ab, w, h, &kernel);
        for i in 0..ma.len() {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let var_a = saa[i] - mu_a * mu_a;
            let var_b = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// `10·log10(1 / MSE)` with unit peak; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.pixels.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// SSIM and PSNR on the aligned crops of both images.
pub fn aligned_fidelity(original: &Image, masked: &Image, params: &SsimParams) -> Result<(f64, f64)> {
    let a = align(original).to_image();
    let b = align(masked).to_image();
    Ok((ssim_with(&a, &b, params)?, psnr(&a, &b)?))
}

/// Synthetic identification protocol: identity `i` is the head scene with
/// seed `seed + i`, seen from `views` jittered viewpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub seed: u64,
    pub identities: usize,
    pub views: usize,
    /// Standard deviation of the per-view DC noise.
    pub jitter: f64,
    pub primitives: usize,
    pub width: usize,
    pub height: usize,
    /// Viewpoints are uniform over `[-range, range]` in pitch and yaw.
    pub range: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            seed: 1000,
            identities: 10,
            views: 22,
            jitter: 0.02,
            primitives: 400,
            width: 64,
            height: 64,
            range: 0.5,
        }
    }
}

impl ProtocolSpec {
    pub fn new(seed: u64, identities: usize, views: usize, jitter: f64) -> Self {
        ProtocolSpec {
            seed,
            identities,
            views,
            jitter,
            ..ProtocolSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.views < 2 {
            return Err(Error::invalid("protocol needs at least 2 identities and 2 views each"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(self.range >= 0.0 && self.range.is_finite()) {
            return Err(Error::invalid("jitter and range must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn identity_seed(&self, i: usize) -> u64 {
        self.seed + i as u64
    }

    pub fn identity_id(&self, i: usize) -> String {
        format!("s{}", self.identity_seed(i))
    }

    pub fn distribution(&self) -> Result<ViewpointDistribution> {
        ViewpointDistribution::symmetric(self.range, crate::camera::default_frontal(self.width, self.height)?)
    }
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub spec: ProtocolSpec,
    pub ids: Vec<String>,
    pub scenes: Vec<Scene>,
    /// Viewpoints per identity, in gallery order.
    pub angles: Vec<Vec<Angles>>,
    pub dist: ViewpointDistribution,
    pub gallery: Gallery,
    pub pairs: ScorePairs,
}

impl Protocol {
    pub fn identity_count(&self) -> usize {
        self.ids.len()
    }
}

fn jittered(scene: &Scene, noise: &Normal<f64>, rng: &mut crate::rng::Rng) -> Scene {
    let mut s = scene.clone();
    for p in &mut s.primitives {
        for c in &mut p.sh_dc {
            *c += noise.sample(rng);
        }
    }
    s
}

/// Builds the gallery and the positive/negative score pairs. Positives are
/// all same-identity entry pairs, negatives all cross-identity pairs.
pub fn build_synthetic_protocol(
    spec: &ProtocolSpec,
    embedder: &SurrogateEmbedder,
    opts: &RenderOptions,
) -> Result<Protocol> {
    spec.validate()?;
    let dist = spec.distribution()?;
    let noise = Normal::new(0.0, spec.jitter).map_err(|e| Error::invalid(e.to_string()))?;
    let ids: Vec<String> = (0..spec.identities).map(|i| spec.identity_id(i)).collect();
    let scenes: Vec<Scene> = (0..spec.identities)
        .map(|i| synth_scene(spec.identity_seed(i), spec.primitives, Layout::HeadLike))
        .collect::<Result<_>>()?;
    let mut angles = Vec::with_capacity(spec.identities);
    let mut jobs = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut row = Vec::with_capacity(spec.views);
        for j in 0..spec.views {
            let mut rng = substream(spec.seed, i as u64, j as u64);
            let a = crate::camera::sample_angles(&dist, 1, &mut rng)[0];
            let s = if spec.jitter > 0.0 { jittered(scene, &noise, &mut rng) } else { scene.clone() };
            row.push(a);
            jobs.push((i, s, a));
        }
        angles.push(row);
    }
    let embeddings: Vec<Embedding> = jobs
        .par_iter()
        .enumerate()
        .map(|(n, (_, s, a))| {
            let (img, _) = render(s, &dist.view(*a), &Pose::identity(), opts).map_err(|e| e.in_view(n))?;
            embedder.embed_image(&img)
        })
        .collect::<Result<_>>()?;
    let mut gallery = Gallery::default();
    for ((i, _, _), e) in jobs.iter().zip(embeddings) {
        gallery.push(GalleryEntry {
            id: ids[*i].clone(),
            embedding: e,
        })?;
    }
    let mut pairs = ScorePairs::default();
    let entries = gallery.entries();
    for a in 0..entries.len() {
        for b in a + 1..entries.len() {
            let s = dot(&entries[a].embedding, &entries[b].embedding);
            if entries[a].id == entries[b].id {
                pairs.positives.push(s);
            } else {
                pairs.negatives.push(s);
            }
        }
    }
    Ok(Protocol {
        spec: *spec,
        ids,
        scenes,
        angles,
        dist,
        gallery,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub id: String,
    pub view: usize,
    pub rank: usize,
    /// Best similarity to a same-identity reference.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub accuracy_at_k: BTreeMap<usize, f64>,
    pub match_rate: f64,
    pub tau_eer: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub ranks: Vec<QueryRank>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// `key = value` lines, one per metric, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "label = {}", self.label).unwrap();
        for (k, v) in &self.accuracy_at_k {
            writeln!(s, "rank_{k} = {v:.6}").unwrap();
        }
        writeln!(s, "match_rate = {:.6}", self.match_rate).unwrap();
        writeln!(s, "tau_eer = {:.6}", self.tau_eer).unwrap();
        writeln!(s, "ssim = {:.6}", self.ssim).unwrap();
        writeln!(s, "psnr = {}", fmt_db(self.psnr)).unwrap();
        writeln!(s, "queries = {}", self.ranks.len()).unwrap();
        s
    }

    pub fn ranks_csv(&self) -> String {
        let mut s = String::from("id,view,rank,similarity\n");
        for r in &self.ranks {
            writeln!(s, "{},{},{},{:.6}", r.id, r.view, r.rank, r.similarity).unwrap();
        }
        s
    }
}

/// Aligned table of several reports, one row each.
pub fn report_table(reports: &[EvalReport]) -> String {
    let ks: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.accuracy_at_k.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["label".to_string()];
    header.extend(ks.iter().map(|k| format!("rank-{k}")));
    header.extend(["match".into(), "ssim".into(), "psnr".into()]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(ks.iter().map(|k| {
                r.accuracy_at_k
                    .get(k)
                    .map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v))
            }));
            row.push(format!("{:.1}%", 100.0 * r.match_rate));
            row.push(format!("{:.4}", r.ssim));
            row.push(fmt_db(r.psnr));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = line(&header);
    s.push('\n');
    for r in &rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

fn render_view(scene: &Scene, view: &CameraView, opts: &RenderOptions) -> Result<Image> {
    Ok(render(scene, view, &Pose::identity(), opts)?.0)
}

/// Renders every identity's masked scene at that identity's protocol
/// viewpoints and scores the queries against the gallery: rank-k accuracy,
/// match rate at `tau`, and SSIM/PSNR against the original scene's renders.
pub fn evaluate(
    label: &str,
    protocol: &Protocol,
    masked: &[Scene],
    embedder: &SurrogateEmbedder,
    tau: f64,
    ks: &[usize],
    ssim_params: &SsimParams,
    opts: &RenderOptions,
) -> Result<EvalReport> {
    if masked.len() != protocol.identity_count() {
        return Err(Error::invalid(format!(
            "{} masked scenes for {} identities",
            masked.len(),
            protocol.identity_count()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("k list must be nonempty with k ≥ 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..protocol.identity_count())
        .flat_map(|i| (0..protocol.angles[i].len()).map(move |j| (i, j)))
        .collect();
    let per_query: Vec<(Embedding, f64, f64)> = jobs
        .par_iter()
        .enumerate()
        .map(|(n, &(i, j))| {
            let view = protocol.dist.view(protocol.angles[i][j]);
            let orig = render_view(&protocol.scenes[i], &view, opts).map_err(|e| e.in_view(n))?;
            let img = render_view(&masked[i], &view, opts).map_err(|e| e.in_view(n))?;
            let (s, p) = aligned_fidelity(&orig, &img, ssim_params)?;
            Ok((embedder.embed_image(&img)?, s, p))
        })
        .collect::<Result<_>>()?;
    let queries: Vec<(Embedding, String)> = jobs
        .iter()
        .zip(&per_query)
        .map(|(&(i, _), (e, _, _))| (e.clone(), protocol.ids[i].clone()))
        .collect();
    let rank_list = ranks(&queries, &protocol.gallery)?;
    let mut accuracy_at_k = BTreeMap::new();
    for &k in ks {
        accuracy_at_k.insert(k, rate(&rank_list, k));
    }
    let mut ranks_out = Vec::with_capacity(jobs.len());
    for ((&(i, j), (q, _)), &rank) in jobs.iter().zip(&queries).zip(&rank_list) {
        let best = protocol
            .gallery
            .references(&protocol.ids[i])?
            .into_iter()
            .map(|r| dot(q, r))
            .fold(f64::NEG_INFINITY, f64::max);
        ranks_out.push(QueryRank {
            id: protocol.ids[i].clone(),
            view: j,
            rank,
            similarity: best,
        });
    }
    let n = per_query.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        accuracy_at_k,
        match_rate: match_rate(&queries, &protocol.gallery, tau)?,
        tau_eer: tau,
        ssim: per_query.iter().map(|q| q.1).sum::<f64>() / n,
        psnr: per_query.iter().map(|q| q.2).sum::<f64>() / n,
        ranks: ranks_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Match,
    NoMatch,
}

impl Verdict {
    pub fn of(similarity: f64, tau: f64) -> Self {
        if similarity >= tau - MATCH_SLACK {
            Verdict::Match
        } else {
            Verdict::NoMatch
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Match => "match",
            Verdict::NoMatch => "no_match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub pitch: f64,
    pub yaw: f64,
    pub similarity: f64,
    pub verdict: Verdict,
    pub original_similarity: f64,
    pub original_verdict: Verdict,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Counts over `[-1, 1]` in steps of 0.1; 1.0 falls in the last bin.
pub fn similarity_histogram(values: impl IntoIterator<Item = f64>) -> [usize; HISTOGRAM_BINS] {
    let mut h = [0; HISTOGRAM_BINS];
    for v in values {
        let b = (((v + 1.0) / 0.1).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
        h[b as usize] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub rows: usize,
    pub cols: usize,
    pub tau: f64,
    /// Row-major; pitch varies down the rows.
    pub cells: Vec<GridCell>,
    pub histogram: [usize; HISTOGRAM_BINS],
    pub original_histogram: [usize; HISTOGRAM_BINS],
}

impl RotationReport {
    pub fn no_match_count(&self) -> usize {
        self.cells.iter().filter(|c| c.verdict == Verdict::NoMatch).count()
    }

    pub fn original_match_count(&self) -> usize {
        self.cells.iter().filter(|c| c.original_verdict == Verdict::Match).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "rows = {}", self.rows).unwrap();
        writeln!(s, "cols = {}", self.cols).unwrap();
        writeln!(s, "tau = {:.6}", self.tau).unwrap();
        writeln!(s, "no_match_cells = {}", self.no_match_count()).unwrap();
        writeln!(s, "original_match_cells = {}", self.original_match_count()).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "similarity (masked), pitch down / yaw across").unwrap();
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|c| {
                    let cell = &self.cells[r * self.cols + c];
                    let mark = if cell.verdict == Verdict::Match { '*' } else { ' ' };
                    format!("{:>7.3}{mark}", cell.similarity)
                })
                .collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "{:>12}  {:>6}  {:>8}", "bin", "masked", "original").unwrap();
        for b in 0..HISTOGRAM_BINS {
            let lo = -1.0 + 0.1 * b as f64;
            writeln!(
                s,
                "[{lo:>4.1},{:>4.1})  {:>6}  {:>8}",
                lo + 0.1,
                self.histogram[b],
                self.original_histogram[b]
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,pitch,yaw,similarity,verdict,original_similarity,original_verdict\n");
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{:.6},{}",
                c.row,
                c.col,
                c.pitch,
                c.yaw,
                c.similarity,
                c.verdict.name(),
                c.original_similarity,
                c.original_verdict.name()
            )
            .unwrap();
        }
        s
    }
}

/// Best cosine similarity to any reference.
fn best_similarity(e: &Embedding, references: &[Embedding]) -> f64 {
    references.iter().map(|r| dot(e, r)).fold(f64::NEG_INFINITY, f64::max)
}

/// Renders both scenes over a `rows × cols` grid spanning `dist` and records
/// each cell's best similarity to `references` with its verdict at `tau`.
#[allow(clippy::too_many_arguments)]
pub fn rotation_grid_report(
    masked: &Scene,
    original: &Scene,
    embedder: &SurrogateEmbedder,
    references: &[Embedding],
    dist: &ViewpointDistribution,
    rows: usize,
    cols: usize,
    tau: f64,
    opts: &RenderOptions,
) -> Result<RotationReport> {
    if references.is_empty() {
        return Err(Error::invalid("rotation report needs at least one reference"));
    }
    let angles = grid_angles(dist, rows, cols)?;
    let sims: Vec<(f64, f64)> = angles
        .par_iter()
        .enumerate()
        .map(|(n, a)| {
            let view = rotate_view(&dist.base_view, a.pitch, a.yaw);
            let wrap = |e: Error| Error::invalid(format!("grid cell ({}, {}): {e}", n / cols, n % cols));
            let m = embedder.embed_image(&render_view(masked, &view, opts).map_err(wrap)?)?;
            let o = embedder.embed_image(&render_view(original, &view, opts).map_err(wrap)?)?;
            Ok((best_similarity(&m, references), best_similarity(&o, references)))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<GridCell> = angles
        .iter()
        .zip(&sims)
        .enumerate()
        .map(|(n, (a, &(s, o)))| GridCell {
            row: n / cols,
            col: n % cols,
            pitch: a.pitch,
            yaw: a.yaw,
            similarity: s,
            verdict: Verdict::of(s, tau),
            original_similarity: o,
            original_verdict: Verdict::of(o, tau),
        })
        .collect();
    Ok(RotationReport {
        rows,
        cols,
        tau,
        histogram: similarity_histogram(cells.iter().map(|c| c.similarity)),
        original_histogram: similarity_histogram(cells.iter().map(|c| c.original_similarity)),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    fn entry(id: &str, v: &[f64]) -> GalleryEntry {
        GalleryEntry {
            id: id.into(),
            embedding: emb(v),
        }
    }

    fn random_unit(rng: &mut impl rand::Rng, dim: usize) -> Embedding {
        emb(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn distance_examples() {
        let a = emb(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&a, &a), 0.0);
        assert_eq!(cosine_distance(&a, &emb(&[-1.0, 0.0])), 2.0);
        assert_eq!(cosine_distance(&a, &emb(&[0.0, 1.0])), 1.0);
    }

    /// Rank by exhaustive enumeration: try every permutation of the gallery,
    /// keep those sorted by (distance, position), read off the rank.
    fn rank_by_permutations(q: &Embedding, id: &str, g: &Gallery) -> usize {
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        let d: Vec<f64> = g.entries().iter().map(|e| cosine_distance(q, &e.embedding)).collect();
        let ordered: Vec<Vec<usize>> = perms((0..g.len()).collect())
            .into_iter()
            .filter(|p| p.windows(2).all(|w| d[w[0]] < d[w[1]] || (d[w[0]] == d[w[1]] && w[0] < w[1])))
            .collect();
        assert_eq!(ordered.len(), 1);
        ordered[0].iter().position(|&i| g.entries()[i].id == id).unwrap() + 1
    }

    #[test]
    fn toy_gallery_rank_matches_enumeration() {
        let g = Gallery::new(vec![
            entry("a", &[1.0, 0.0, 0.0]),
            entry("b", &[0.8, 0.6, 0.0]),
            entry("c", &[0.0, 1.0, 0.0]),
            entry("a", &[0.0, 0.0, 1.0]),
            entry("b", &[0.6, 0.0, 0.8]),
            entry("c", &[0.5, 0.5, 0.7071]),
        ])
        .unwrap();
        let q = emb(&[0.7, 0.7, 0.1]);
        for id in ["a", "b", "c"] {
            assert_eq!(rank_of(&q, id, &g).unwrap(), rank_by_permutations(&q, id, &g), "{id}");
        }
    }

    #[test]
    fn exact_member_ranks_first() {
        let g = Gallery::new(vec![entry("x", &[0.0, 1.0]), entry("y", &[1.0, 0.0])]).unwrap();
        assert_eq!(rank_of(&emb(&[1.0, 0.0]), "y", &g).unwrap(), 1);
    }

    #[test]
    fn ties_follow_entry_order() {
        // the query is orthogonal to every entry, so all distances equal 1
        let g = Gallery::new(vec![
            entry("b", &[1.0, 0.0, 0.0]),
            entry("c", &[0.0, 1.0, 0.0]),
            entry("a", &[0.0, -1.0, 0.0]),
            entry("a", &[-1.0, 0.0, 0.0]),
        ])
        .unwrap();
        let q = emb(&[0.0, 0.0, 1.0]);
        assert_eq!(rank_of(&q, "a", &g).unwrap(), 3);
        assert_eq!(rank_of(&q, "a", &g).unwrap(), rank_by_permutations(&q, "a", &g));
        assert_eq!(rank_of(&q, "c", &g).unwrap(), 2);
    }

    #[test]
    fn unknown_id_is_rejected() {
        let g = Gallery::new(vec![entry("a", &[1.0])]).unwrap();
        assert!(matches!(rank_of(&emb(&[1.0]), "zz", &g), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn accuracy_examples() {
        // ranks 1, 3, 7 against a 7-entry gallery
        let g = Gallery::new(
            (0..7)
                .map(|i| {
                    let mut v = vec![0.0; 7];
                    v[i] = 1.0;
                    entry(&format!("{i}"), &v)
                })
                .collect(),
        )
        .unwrap();
        let q = |weights: &[f64], id: &str| (emb(weights), id.to_string());
        let queries = vec![
            q(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], "0"),
            q(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], "2"),
            q(&[7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], "6"),
        ];
        assert_eq!(ranks(&queries, &g).unwrap(), vec![1, 3, 7]);
        assert!((accuracy_at_k(&queries, &g, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_at_k(&queries, &g, 7).unwrap(), 1.0);
        assert_eq!(accuracy_at_k(&queries, &g, 100).unwrap(), 1.0);
        assert_eq!(accuracy_at_k(&queries[..1], &g, 1).unwrap(), 1.0);
        assert!(accuracy_at_k(&[], &g, 1).is_err());
        assert!(accuracy_at_k(&queries, &g, 0).is_err());
    }

    #[test]
    fn gallery_round_trips_through_bytes() {
        let mut rng = seeded(4);
        let g = Gallery::new(
            (0..5)
                .map(|i| GalleryEntry {
                    id: format!("id-{}", i % 2),
                    embedding: random_unit(&mut rng, EMBEDDING_DIM),
                })
                .collect(),
        )
        .unwrap();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..8], &[5, 0, 0, 0, 0, 2, 0, 0]);
        let back = Gallery::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.positions("id-0").unwrap(), &[0, 2, 4]);
        for (a, b) in g.entries().iter().zip(back.entries()) {
            assert!(cosine_distance(&a.embedding, &b.embedding) < 1e-12);
        }
        assert!(Gallery::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn eer_examples() {
        let c = calibrate_eer(&ScorePairs {
            positives: vec![0.8, 0.9],
            negatives: vec![0.1, 0.2],
        })
        .unwrap();
        assert_eq!(c.eer, 0.0);
        assert!(c.tau > 0.2 && c.tau <= 0.8, "{c:?}");

        let c = calibrate_eer(&ScorePairs {
            positives: vec![0.6, 0.4],
            negatives: vec![0.5, 0.3],
        })
        .unwrap();
        assert_eq!(c.eer, 0.5);
        let (far, frr) = error_rates(&[0.4, 0.6], &[0.3, 0.5], c.tau);
        assert_eq!((far, frr), (0.5, 0.5));

        let same = vec![0.1, 0.4, 0.4, 0.9];
        let c = calibrate_eer(&ScorePairs {
            positives: same.clone(),
            negatives: same,
        })
        .unwrap();
        assert_eq!(c.eer, 0.5);

        let c = calibrate_eer(&ScorePairs {
            positives: vec![0.3; 4],
            negatives: vec![0.3; 2],
        })
        .unwrap();
        assert_eq!((c.tau, c.eer), (0.3, 0.5));
        assert!(calibrate_eer(&ScorePairs::default()).is_err());
    }

    /// Threshold scan at 1e-4 resolution over [-1, 1]; the EER estimate is
    /// the mean of FAR and FRR where they are closest.
    fn scan_eer(pos: &[f64], neg: &[f64]) -> f64 {
        let mut p = pos.to_vec();
        let mut n = neg.to_vec();
        p.sort_by(f64::total_cmp);
        n.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=20_000 {
            let t = -1.0 + i as f64 * 1e-4;
            let (far, frr) = error_rates(&p, &n, t);
            if (far - frr).abs() < best.0 {
                best = ((far - frr).abs(), 0.5 * (far + frr));
            }
        }
        best.1
    }

    #[test]
    fn eer_matches_threshold_scan_on_overlapping_gaussians() {
        let mut rng = seeded(8);
        for trial in 0..5 {
            let pn = Normal::<f64>::new(0.5, 0.15).unwrap();
            let nn = Normal::<f64>::new(0.1 + 0.05 * trial as f64, 0.15).unwrap();
            let pos: Vec<f64> = (0..1500).map(|_| pn.sample(&mut rng).clamp(-1.0, 1.0)).collect();
            let neg: Vec<f64> = (0..4000).map(|_| nn.sample(&mut rng).clamp(-1.0, 1.0)).collect();
            let c = calibrate_eer(&ScorePairs {
                positives: pos.clone(),
                negatives: neg.clone(),
            })
            .unwrap();
            assert!((c.eer - scan_eer(&pos, &neg)).abs() < 1e-3, "trial {trial}");
        }
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-100i32..=100).prop_map(|v| v as f64 / 100.0), 1..60)
    }

    proptest! {
        #[test]
        fn rank_agrees_with_full_sort(seed in any::<u64>(), size in 2usize..200, dim in 2usize..6) {
            let mut rng = seeded(seed);
            let ids = 1 + size / 3;
            let entries: Vec<GalleryEntry> = (0..size)
                .map(|i| GalleryEntry { id: format!("{}", i % ids), embedding: random_unit(&mut rng, dim) })
                .collect();
            let g = Gallery::new(entries).unwrap();
            let q = random_unit(&mut rng, dim);
            let target = format!("{}", rng.random_range(0..ids.min(size)));
            // oracle: count entries that sort before the best true entry
            let d: Vec<f64> = g.entries().iter().map(|e| 1.0 - dot(&q, &e.embedding)).collect();
            let best = g.positions(&target).unwrap().iter().copied()
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))).unwrap();
            let before = (0..size).filter(|&j| d[j] < d[best] || (d[j] == d[best] && j < best)).count();
            prop_assert_eq!(rank_of(&q, &target, &g).unwrap(), before + 1);
        }

        #[test]
        fn accuracy_is_monotone_in_k(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let g = Gallery::new((0..30).map(|i| GalleryEntry {
                id: format!("{}", i % 6),
                embedding: random_unit(&mut rng, 4),
            }).collect()).unwrap();
            let queries: Vec<(Embedding, String)> =
                (0..12).map(|i| (random_unit(&mut rng, 4), format!("{}", i % 6))).collect();
            let mut last = 0.0;
            for k in 1..=30 {
                let a = accuracy_at_k(&queries, &g, k).unwrap();
                prop_assert!(a >= last);
                last = a;
            }
            prop_assert_eq!(last, 1.0);
        }

        /// FAR − FRR is constant between candidates, so at an interpolated τ the
        /// step curves differ by at most the jump at the candidate just below
        /// τ: the share of scores tied there.
        #[test]
        fn eer_gap_is_within_one_step(pos in scores(), neg in scores()) {
            let c = calibrate_eer(&ScorePairs { positives: pos.clone(), negatives: neg.clone() }).unwrap();
            let mut p = pos.clone();
            let mut n = neg.clone();
            p.sort_by(f64::total_cmp);
            n.sort_by(f64::total_cmp);
            let (far, frr) = error_rates(&p, &n, c.tau);
            let below = p.iter().chain(&n).copied().filter(|&s| s <= c.tau).fold(f64::NEG_INFINITY, f64::max);
            let share = |v: &[f64]| v.iter().filter(|&&s| s == below).count() as f64 / v.len() as f64;
            let jump = share(&p) + share(&n);
            prop_assert!((far - frr).abs() <= jump + 1e-6, "far {} frr {} tau {} jump {}", far, frr, c.tau, jump);
            prop_assert!((0.0..=1.0).contains(&c.eer));
        }

        #[test]
        fn ssim_is_symmetric_and_reflexive(seed in any::<u64>(), w in 11usize..24, h in 11usize..24) {
            let mut rng = seeded(seed);
            let a = Image::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
            let b = Image::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        }
    }

    #[test]
    fn match_rate_examples() {
        let refs = Gallery::new(vec![
            entry("a", &[1.0, 0.0, 0.0]),
            entry("a", &[0.0, 1.0, 0.0]),
            entry("b", &[0.0, 0.0, 1.0]),
            entry("c", &[1.0, 1.0, 0.0]),
        ])
        .unwrap();
        let self_queries: Vec<(Embedding, String)> =
            refs.entries().iter().map(|e| (e.embedding.clone(), e.id.clone())).collect();
        assert_eq!(match_rate(&self_queries, &refs, 1.0).unwrap(), 1.0);
        assert_eq!(match_rate(&self_queries, &refs, -1.0).unwrap(), 1.0);

        let queries = vec![
            (emb(&[0.2, 1.0, 0.0]), "a".to_string()),
            (emb(&[1.0, 0.0, 0.3]), "b".to_string()),
            (emb(&[1.0, 0.9, 0.0]), "c".to_string()),
            (emb(&[-1.0, 0.0, 0.0]), "c".to_string()),
        ];
        let tau = 0.7;
        // oracle: every same-id pair, keep the maximum
        let expected = queries
            .iter()
            .filter(|(q, id)| {
                refs.entries()
                    .iter()
                    .filter(|e| &e.id == id)
                    .any(|e| q.values.iter().zip(&e.embedding.values).map(|(x, y)| x * y).sum::<f64>() >= tau)
            })
            .count() as f64
            / 4.0;
        assert_eq!(match_rate(&queries, &refs, tau).unwrap(), expected);
        assert_eq!(expected, 0.5);
        assert_eq!(match_rate(&queries, &refs, 1.01).unwrap(), 0.0);
        let stranger = vec![(emb(&[1.0, 0.0, 0.0]), "d".to_string())];
        assert!(matches!(match_rate(&stranger, &refs, 0.5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fidelity_analytic_cases() {
        let mut rng = seeded(1);
        let a = Image::from_fn(32, 24, |_, _| std::array::from_fn(|_| rng.random_range(0.0..0.9)));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        let zero = Image::filled(16, 16, [0.0; 3]);
        let tenth = Image::filled(16, 16, [0.1; 3]);
        assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-12);

        let check = Image::from_fn(16, 16, |x, y| [((x + y) % 2) as f64; 3]);
        let inverse = Image::from_fn(16, 16, |x, y| [(1 - (x + y) % 2) as f64; 3]);
        assert_eq!(psnr(&check, &inverse).unwrap(), 0.0);

        let flat = Image::filled(16, 16, [0.4, 0.5, 0.6]);
        assert_eq!(ssim(&flat, &flat).unwrap(), 1.0);

        let negative = Image::from_pixels(32, 24, a.pixels.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &negative).unwrap() < 0.5);

        assert!(ssim(&a, &zero).is_err());
        assert!(psnr(&a, &zero).is_err());
    }

    /// Direct SSIM on one window: a 11×11 image has a single valid position,
    /// where the statistics are plain Gaussian-weighted moments.
    #[test]
    fn single_window_ssim_matches_moments() {
        let mut rng = seeded(3);
        let a = Image::from_fn(11, 11, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
        let b = Image::from_fn(11, 11, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
        let w: Vec<f64> = (0..121)
            .map(|i| {
                let (x, y) = ((i % 11) as f64 - 5.0, (i / 11) as f64 - 5.0);
                (-(x * x + y * y) / 4.5).exp()
            })
            .collect();
        let wsum: f64 = w.iter().sum();
        let mut expect = 0.0;
        for c in 0..3 {
            let m = |img: &Image| (0..121).map(|i| w[i] * img.pixels[3 * i + c]).sum::<f64>() / wsum;
            let (ma, mb) = (m(&a), m(&b));
            let cov = |p: &Image, q: &Image, mp: f64, mq: f64| {
                (0..121)
                    .map(|i| w[i] * (p.pixels[3 * i + c] - mp) * (q.pixels[3 * i + c] - mq))
                    .sum::<f64>()
                    / wsum
            };
            let (va, vb, vab) = (cov(&a, &a, ma, ma), cov(&b, &b, mb, mb), cov(&a, &b, ma, mb));
            let (c1, c2) = (1e-4, 9e-4);
            expect += (2.0 * ma * mb + c1) * (2.0 * vab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)) / 3.0;
        }
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn histogram_bins() {
        let h = similarity_histogram([-1.0, -0.95, 0.0, 0.05, 0.99, 1.0]);
        assert_eq!(h[0], 2);
        assert_eq!(h[10], 2);
        assert_eq!(h[19], 2);
        assert_eq!(h.iter().sum::<usize>(), 6);
    }

    fn small_spec() -> ProtocolSpec {
        ProtocolSpec {
            identities: 3,
            views: 3,
            primitives: 120,
            width: 32,
            height: 32,
            ..ProtocolSpec::default()
        }
    }

    #[test]
    fn zero_jitter_same_view_positives_are_one() {
        let spec = ProtocolSpec {
            jitter: 0.0,
            range: 0.0,
            ..small_spec()
        };
        let emb = SurrogateEmbedder::new(1, crate::embedder::Architecture::A);
        let p = build_synthetic_protocol(&spec, &emb, &RenderOptions::default()).unwrap();
        assert_eq!(p.pairs.positives.len(), 3 * 3);
        assert_eq!(p.pairs.negatives.len(), 3 * 3 * 3);
        assert!(p.pairs.positives.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert_eq!(p.gallery.identity_count(), 3);
    }

    #[test]
    fn protocol_is_deterministic_and_validated() {
        let emb = SurrogateEmbedder::new(1, crate::embedder::Architecture::A);
        let a = build_synthetic_protocol(&small_spec(), &emb, &RenderOptions::default()).unwrap();
        let b = build_synthetic_protocol(&small_spec(), &emb, &RenderOptions::default()).unwrap();
        assert_eq!(a.gallery.to_bytes(), b.gallery.to_bytes());
        assert_eq!(a.pairs, b.pairs);
        let bad = ProtocolSpec {
            identities: 1,
            ..small_spec()
        };
        assert!(build_synthetic_protocol(&bad, &emb, &RenderOptions::default()).is_err());
    }

    #[test]
    fn unmasked_self_evaluation_is_perfect() {
        let spec = ProtocolSpec {
            jitter: 0.0,
            ..small_spec()
        };
        let emb = SurrogateEmbedder::new(1, crate::embedder::Architecture::A);
        let p = build_synthetic_protocol(&spec, &emb, &RenderOptions::default()).unwrap();
        let r = evaluate("avatar", &p, &p.scenes, &emb, 0.9, &[1, 50], &SsimParams::default(), &RenderOptions::default())
            .unwrap();
        assert_eq!(r.accuracy_at_k[&1], 1.0);
        assert_eq!(r.accuracy_at_k[&50], 1.0);
        assert_eq!(r.match_rate, 1.0);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.psnr, f64::INFINITY);
        assert!(r.to_text().contains("rank_50 = 1.000000"));
        assert!(report_table(&[r]).contains("rank-50"));
    }

    #[test]
    fn rotation_grid_self_reference() {
        let scene = synth_scene(5, 150, Layout::HeadLike).unwrap();
        let emb = SurrogateEmbedder::new(1, crate::embedder::Architecture::A);
        let base = crate::camera::default_frontal(32, 32).unwrap();
        let opts = RenderOptions::default();
        let reference = crate::embedder::reference_embedding(&emb, &scene, &base, &Pose::identity(), &opts).unwrap();
        let dist = ViewpointDistribution::symmetric(0.8, base).unwrap();
        let r = rotation_grid_report(&scene, &scene, &emb, &[reference], &dist, 3, 3, 0.5, &opts).unwrap();
        assert_eq!(r.cells.len(), 9);
        let center = r.cells[4];
        assert_eq!((center.pitch, center.yaw), (0.0, 0.0));
        assert!((center.similarity - 1.0).abs() < 1e-6);
        assert_eq!(r.histogram, r.original_histogram);
        assert_eq!(r.to_csv().lines().count(), 10);
        assert!(rotation_grid_report(&scene, &scene, &emb, &[], &dist, 3, 3, 0.5, &opts).is_err());
        assert!(rotation_grid_report(&scene, &scene, &emb, &r.cells.iter().map(|_| emb_unit()).collect::<Vec<_>>(), &dist, 0, 3, 0.5, &opts).is_err());
    }

    fn emb_unit() -> Embedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = 1.0;
        Embedding { values: v }
    }
}
