//! Binary little-endian PLY serialization of Gaussian clouds.
//!
//! Layout (version `stillsplat_cloud_v1`): per-vertex float32 properties in
//! this exact order — `x y z rot_w rot_x rot_y rot_z log_scale_x log_scale_y
//! log_scale_z opacity_logit` followed by `sh_<k>_r sh_<k>_g sh_<k>_b` for
//! k in 0..(degree+1)^2. The SH degree is recovered from the property count.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::CoreError;
use crate::gauss::{GaussianCloud, GaussianPoint};
use crate::sh;
use crate::Result;

const VERSION_COMMENT: &str = "stillsplat_cloud_v1";

const FIXED_PROPS: [&str; 11] = [
    "x",
    "y",
    "z",
    "rot_w",
    "rot_x",
    "rot_y",
    "rot_z",
    "log_scale_x",
    "log_scale_y",
    "log_scale_z",
    "opacity_logit",
];

fn degree_from_coeffs(coeffs: usize) -> Option<usize> {
    (0..=sh::MAX_DEGREE).find(|&d| sh::coeff_count(d) == coeffs)
}

pub fn save_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let ncoef = cloud.coeff_count();
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "comment {VERSION_COMMENT}")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in FIXED_PROPS {
        writeln!(w, "property float {p}")?;
    }
    for k in 0..ncoef {
        for c in ["r", "g", "b"] {
            writeln!(w, "property float sh_{k}_{c}")?;
        }
    }
    writeln!(w, "end_header")?;
    let mut buf = Vec::with_capacity((11 + 3 * ncoef) * 4);
    for g in &cloud.points {
        buf.clear();
        let mut push = |v: f64| buf.extend_from_slice(&(v as f32).to_le_bytes());
        push(g.position.x);
        push(g.position.y);
        push(g.position.z);
        for q in g.rotation {
            push(q);
        }
        for s in g.log_scale.iter() {
            push(*s);
        }
        push(g.opacity_logit);
        for k in 0..ncoef {
            for c in 0..3 {
                push(g.sh[k][c]);
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    let file = std::fs::File::open(path)
        .map_err(|_| CoreError::MissingFile(path.display().to_string()))?;
    let mut r = BufReader::new(file);

    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut r)? != "ply" {
        return Err(CoreError::CloudFormat("missing ply magic".into()));
    }
    if read_line(&mut r)? != "format binary_little_endian 1.0" {
        return Err(CoreError::CloudFormat(
            "expected binary_little_endian 1.0".into(),
        ));
    }
    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut versioned = false;
    loop {
        let l = read_line(&mut r)?;
        if l == "end_header" {
            break;
        } else if let Some(c) = l.strip_prefix("comment ") {
            if c == VERSION_COMMENT {
                versioned = true;
            }
        } else if let Some(v) = l.strip_prefix("element vertex ") {
            vertex_count = Some(v.parse().map_err(|_| {
                CoreError::CloudFormat(format!("bad vertex count '{v}'"))
            })?);
        } else if let Some(p) = l.strip_prefix("property float ") {
            props.push(p.to_string());
        } else if l.starts_with("property ") {
            return Err(CoreError::CloudFormat(format!(
                "unsupported property type in '{l}'"
            )));
        } else if l.starts_with("element ") {
            return Err(CoreError::CloudFormat(format!("unsupported element '{l}'")));
        } else if l.is_empty() {
            return Err(CoreError::CloudFormat("truncated header".into()));
        }
    }
    if !versioned {
        return Err(CoreError::CloudFormat(format!(
            "missing version comment '{VERSION_COMMENT}'"
        )));
    }
    let count =
        vertex_count.ok_or_else(|| CoreError::CloudFormat("missing vertex element".into()))?;

    // The fixed prefix plus whole sh triples, in documented order.
    if props.len() < FIXED_PROPS.len()
        || props[..FIXED_PROPS.len()] != FIXED_PROPS.map(String::from)
    {
        return Err(CoreError::CloudFormat(
            "fixed property prefix does not match the documented layout".into(),
        ));
    }
    let sh_props = &props[FIXED_PROPS.len()..];
    if sh_props.len() % 3 != 0 {
        return Err(CoreError::CloudFormat(
            "sh properties are not whole rgb triples".into(),
        ));
    }
    let ncoef = sh_props.len() / 3;
    for (k, triple) in sh_props.chunks(3).enumerate() {
        let expect = [format!("sh_{k}_r"), format!("sh_{k}_g"), format!("sh_{k}_b")];
        if triple != expect {
            return Err(CoreError::CloudFormat(format!(
                "unexpected sh property order at coefficient {k}"
            )));
        }
    }
    let degree = degree_from_coeffs(ncoef).ok_or_else(|| {
        CoreError::CloudFormat(format!("{ncoef} sh coefficients matches no degree 0..=3"))
    })?;

    let stride = (FIXED_PROPS.len() + 3 * ncoef) * 4;
    let mut raw = vec![0u8; stride];
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut raw)?;
        let mut off = 0usize;
        let mut next = || {
            let v = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
            v
        };
        let position = Vector3::new(next(), next(), next());
        let rotation = [next(), next(), next(), next()];
        let log_scale = Vector3::new(next(), next(), next());
        let opacity_logit = next();
        let mut sh_c = [[0.0; 3]; sh::MAX_COEFFS];
        for coeff in sh_c.iter_mut().take(ncoef) {
            for c in coeff.iter_mut() {
                *c = next();
            }
        }
        points.push(GaussianPoint {
            position,
            rotation,
            log_scale,
            opacity_logit,
            sh: sh_c,
        });
    }
    Ok(GaussianCloud::from_points(points, degree))
}
