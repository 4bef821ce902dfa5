//! Parameter files.
//!
//! JSON with `version`, `V`, `bias`, `assoc` (nested rows), `kernel` and `R`.
//! Floats are written with 17 significant digits so a save/load cycle is
//! bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use super::{DenoiserParams, Kernel};
use crate::error::{Error, Result};

pub const PARAMS_VERSION: &str = "mdlab-params/1";

fn push_num(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").expect("write to string");
}

fn push_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (k, &x) in xs.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        push_num(out, x);
    }
    out.push(']');
}

pub fn write_params<W: Write>(mut w: W, p: &DenoiserParams) -> Result<()> {
    let v = p.v();
    let mut out = String::with_capacity(24 * (v * v + v) + 128);
    write!(
        out,
        "{{\"version\":\"{PARAMS_VERSION}\",\"V\":{v},\"kernel\":\"{}\",\"R\":{},\"bias\":",
        p.kernel.name(),
        p.radius
    )
    .expect("write to string");
    push_array(&mut out, &p.bias);
    out.push_str(",\"assoc\":[");
    for r in 0..v {
        if r > 0 {
            out.push(',');
        }
        push_array(&mut out, &p.assoc[r * v..(r + 1) * v]);
    }
    out.push_str("]}\n");
    w.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
struct RawParams {
    version: String,
    #[serde(rename = "V")]
    v: usize,
    kernel: Kernel,
    #[serde(rename = "R")]
    radius: usize,
    bias: Vec<f64>,
    assoc: Vec<Vec<f64>>,
}

pub fn read_params<R: Read>(mut r: R) -> Result<DenoiserParams> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let raw: RawParams = serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    if raw.version != PARAMS_VERSION {
        return Err(Error::Version {
            found: raw.version,
            expected: PARAMS_VERSION.into(),
        });
    }
    if raw.bias.len() != raw.v || raw.assoc.len() != raw.v || raw.assoc.iter().any(|row| row.len() != raw.v) {
        return Err(Error::config(format!("parameter shapes do not match V = {}", raw.v)));
    }
    DenoiserParams::from_parts(raw.bias, raw.assoc.concat(), raw.kernel, raw.radius)
}

pub fn save_params(path: &Path, p: &DenoiserParams) -> Result<()> {
    write_params(fs::File::create(path)?, p)
}

pub fn load_params(path: &Path) -> Result<DenoiserParams> {
    read_params(fs::File::open(path)?)
}
