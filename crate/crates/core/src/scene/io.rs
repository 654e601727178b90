//! Versioned text format for scenes.
//!
//! ```text
//! # splatmask scene
//! schema_version 1
//! sh_bands 1
//! background 0.5 0.5 0.5
//! count 2
//! mean 0 0 0; rotation 1 0 0 0; scale 0.1 0.1 0.1; opacity 0.9; sh_dc 0 0 0; sh_rest; region other
//! ...
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{sh_rest_len, GaussianPrimitive, Region, Scene};

pub const SCHEMA_VERSION: u32 = 1;

pub fn write_scene(scene: &Scene) -> String {
    let mut out = String::with_capacity(160 * scene.len() + 128);
    out.push_str("# splatmask scene\n");
    let _ = writeln!(out, "schema_version {}", scene.schema_version);
    let _ = writeln!(out, "sh_bands {}", scene.sh_bands);
    let _ = writeln!(out, "background {}", join(&scene.background));
    let _ = writeln!(out, "count {}", scene.len());
    for p in &scene.primitives {
        let rest: Vec<f64> = p.sh_rest.iter().flatten().copied().collect();
        let _ = writeln!(
            out,
            "mean {}; rotation {}; scale {}; opacity {}; sh_dc {}; sh_rest{}{}; region {}",
            join(&p.mean),
            join(&p.rotation),
            join(&p.scale),
            p.opacity,
            join(&p.sh_dc),
            if rest.is_empty() { "" } else { " " },
            join(&rest),
            p.region
        );
    }
    out
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    scene.validate()?;
    std::fs::write(path, write_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_scene(&text, path)
}

struct Cursor<'a> {
    path: &'a Path,
    line: usize,
}

impl Cursor<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: PathBuf::from(self.path),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn floats(&self, field: &str, raw: &str, expected: usize) -> Result<Vec<f64>> {
        let values = raw
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.err(field, format!("`{t}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != expected {
            return Err(self.err(
                field,
                format!("expected {expected} value(s), found {}", values.len()),
            ));
        }
        Ok(values)
    }

    fn array<const N: usize>(&self, field: &str, raw: &str) -> Result<[f64; N]> {
        let v = self.floats(field, raw, N)?;
        Ok(std::array::from_fn(|i| v[i]))
    }
}

#[derive(Default)]
struct Header {
    schema_version: Option<u32>,
    sh_bands: Option<u32>,
    background: Option<[f64; 3]>,
    count: Option<usize>,
}

pub fn parse_scene(text: &str, path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let mut header = Header::default();
    let mut primitives = Vec::new();
    let mut cur = Cursor { path, line: 0 };

    for (i, raw) in text.lines().enumerate() {
        cur.line = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("mean") {
            let sh_bands = header
                .sh_bands
                .ok_or_else(|| cur.err("sh_bands", "header must precede primitives"))?;
            if header.schema_version.is_none() {
                return Err(cur.err("schema_version", "header must precede primitives"));
            }
            primitives.push(parse_primitive(&cur, line, sh_bands)?);
            continue;
        }
        let (key, value) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let value = value.trim();
        match key {
            "schema_version" => {
                let v: u32 = value
                    .parse()
                    .map_err(|_| cur.err(key, format!("`{value}` is not an integer")))?;
                if v != SCHEMA_VERSION {
                    return Err(Error::Version {
                        found: v,
                        supported: SCHEMA_VERSION,
                    });
                }
                header.schema_version = Some(v);
            }
            "sh_bands" => {
                header.sh_bands = Some(
                    value
                        .parse()
                        .map_err(|_| cur.err(key, format!("`{value}` is not an integer")))?,
                )
            }
            "background" => header.background = Some(cur.array::<3>(key, value)?),
            "count" => {
                header.count = Some(
                    value
                        .parse()
                        .map_err(|_| cur.err(key, format!("`{value}` is not an integer")))?,
                )
            }
            other => return Err(cur.err(other, "unknown header key")),
        }
    }

    cur.line = text.lines().count();
    let schema_version = header
        .schema_version
        .ok_or_else(|| cur.err("schema_version", "missing"))?;
    let sh_bands = header.sh_bands.ok_or_else(|| cur.err("sh_bands", "missing"))?;
    let background = header
        .background
        .ok_or_else(|| cur.err("background", "missing"))?;
    let count = header.count.ok_or_else(|| cur.err("count", "missing"))?;
    if count != primitives.len() {
        return Err(cur.err(
            "count",
            format!("header declares {count} primitives, file has {}", primitives.len()),
        ));
    }
    let scene = Scene {
        primitives,
        sh_bands,
        background,
        schema_version,
    };
    scene.validate()?;
    Ok(scene)
}

fn parse_primitive(cur: &Cursor<'_>, line: &str, sh_bands: u32) -> Result<GaussianPrimitive> {
    let mut mean = None;
    let mut rotation = None;
    let mut scale = None;
    let mut opacity = None;
    let mut sh_dc = None;
    let mut sh_rest = None;
    let mut region = None;
    for field in line.split(';') {
        let field = field.trim();
        let (key, value) = field.split_once(char::is_whitespace).unwrap_or((field, ""));
        let value = value.trim();
        match key {
            "mean" => mean = Some(cur.array::<3>(key, value)?),
            "rotation" => rotation = Some(cur.array::<4>(key, value)?),
            "scale" => scale = Some(cur.array::<3>(key, value)?),
            "opacity" => opacity = Some(cur.floats(key, value, 1)?[0]),
            "sh_dc" => sh_dc = Some(cur.array::<3>(key, value)?),
            "sh_rest" => {
                let flat = cur.floats(key, value, 3 * sh_rest_len(sh_bands))?;
                sh_rest = Some(
                    flat.chunks_exact(3)
                        .map(|c| [c[0], c[1], c[2]])
                        .collect::<Vec<_>>(),
                );
            }
            "region" => {
                region = Some(
                    value
                        .parse::<Region>()
                        .map_err(|_| cur.err(key, format!("unknown region `{value}`")))?,
                )
            }
            other => return Err(cur.err(other, "unknown primitive field")),
        }
    }
    let need = |name: &str| cur.err(name, "missing");
    Ok(GaussianPrimitive {
        mean: mean.ok_or_else(|| need("mean"))?,
        rotation: rotation.ok_or_else(|| need("rotation"))?,
        scale: scale.ok_or_else(|| need("scale"))?,
        opacity: opacity.ok_or_else(|| need("opacity"))?,
        sh_dc: sh_dc.ok_or_else(|| need("sh_dc"))?,
        sh_rest: sh_rest.ok_or_else(|| need("sh_rest"))?,
        region: region.ok_or_else(|| need("region"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_scene, Layout};
    use proptest::prelude::*;

    const MEM: &str = "<memory>";

    #[test]
    fn blob_roundtrip_is_exact() {
        let scene = synth_scene(1, 10, Layout::Blob).unwrap();
        let back = parse_scene(&write_scene(&scene), MEM).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.scene");
        let scene = synth_scene(5, 30, Layout::HeadLike)
            .unwrap()
            .with_sh_bands(2)
            .unwrap();
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);
    }

    #[test]
    fn opacity_out_of_range_names_index() {
        let scene = synth_scene(1, 3, Layout::Blob).unwrap();
        let text = write_scene(&scene);
        let bad: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 6 {
                    let start = l.find("opacity").unwrap();
                    let end = start + l[start..].find(';').unwrap();
                    format!("{}opacity 1.5{}", &l[..start], &l[end..])
                } else {
                    l.to_string()
                }
            })
            .collect();
        match parse_scene(&bad.join("\n"), MEM) {
            Err(Error::Validation { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("opacity"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_scene_rejected() {
        let text = "schema_version 1\nsh_bands 1\nbackground 0 0 0\ncount 0\n";
        assert!(matches!(parse_scene(text, MEM), Err(Error::Scene(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let text = "schema_version 9\nsh_bands 1\nbackground 0 0 0\ncount 0\n";
        assert!(matches!(
            parse_scene(text, MEM),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn malformed_field_reports_line_and_field() {
        let text = "schema_version 1\nsh_bands 1\nbackground 0 0 0\ncount 1\n\
                    mean 0 0 x; rotation 1 0 0 0; scale 1 1 1; opacity 1; sh_dc 0 0 0; sh_rest; region other\n";
        match parse_scene(text, MEM) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(field, "mean");
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = text.replace("scale 1 1 1", "scale 1 1");
        assert!(matches!(parse_scene(&short, MEM), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_floats_roundtrip(
            mean in prop::array::uniform3(-1e6f64..1e6),
            dc in prop::array::uniform3(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO),
            opacity in 0.0f64..=1.0,
            scale in prop::array::uniform3(1e-9f64..10.0),
        ) {
            let mut p = GaussianPrimitive::new(mean, 1.0, opacity, dc);
            p.scale = scale;
            let scene = Scene::new(vec![p], 1, [0.25, 0.5, 1.0]).unwrap();
            let back = parse_scene(&write_scene(&scene), MEM).unwrap();
            for (a, b) in scene.primitives[0].sh_dc.iter().zip(&back.primitives[0].sh_dc) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(scene, back);
        }
    }
}
