//! JSON encoding of transport chains. Every float is a hex-float string so a
//! save/load cycle is bit-exact.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AffineMap, CoordMap, Rotation, RqSpline, TransportChain, TransportLayer};
use super::{ORTHOGONALITY_TOL, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::hexfloat;

pub const CHAIN_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    version: u32,
    dim: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    rotation: RotationDoc,
    map: MapDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RotationDoc {
    /// Row-major.
    Dense { data: Vec<String> },
    Householder { data: Vec<Vec<String>> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum MapDoc {
    /// Interleaved `[shift_i, log_scale_i]`.
    Affine { params: Vec<String> },
    Spline { knots: usize, bound: String, params: Vec<String> },
}

fn enc(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| hexfloat::format(*x)).collect()
}

fn dec(v: &[String]) -> Result<Vec<f64>> {
    v.iter().map(|s| hexfloat::parse(s)).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn chain_to_value(c: &TransportChain) -> Value {
    let layers = c
        .layers()
        .iter()
        .map(|l| LayerDoc {
            rotation: match &l.rotation {
                Rotation::Dense(m) => {
                    let d = m.nrows();
                    let rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
                    RotationDoc::Dense { data: enc(&rows) }
                }
                Rotation::Householder { vectors, .. } => {
                    RotationDoc::Householder { data: vectors.iter().map(|w| enc(w)).collect() }
                }
            },
            map: match &l.map {
                CoordMap::Affine(a) => MapDoc::Affine { params: enc(&a.params()) },
                CoordMap::Spline(s) => MapDoc::Spline {
                    knots: s.knots(),
                    bound: hexfloat::format(s.bound()),
                    params: enc(s.params()),
                },
            },
        })
        .collect();
    let doc = ChainDoc { version: CHAIN_FORMAT_VERSION, dim: c.dim(), layers };
    serde_json::to_value(doc).expect("chain document serializes")
}

pub fn chain_to_json(c: &TransportChain) -> String {
    serde_json::to_string_pretty(&chain_to_value(c)).expect("chain document serializes")
}

pub fn chain_from_json(s: &str) -> Result<TransportChain> {
    chain_from_value(serde_json::from_str(s)?)
}

pub fn chain_from_value(v: Value) -> Result<TransportChain> {
    let doc: ChainDoc = serde_json::from_value(v)?;
    if doc.version != CHAIN_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", doc.version)));
    }
    let d = doc.dim;
    if d == 0 {
        return Err(bad("dim must be positive"));
    }
    let mut chain = TransportChain::new(d);
    for (k, layer) in doc.layers.into_iter().enumerate() {
        let rotation = match layer.rotation {
            RotationDoc::Dense { data } => {
                let vals = dec(&data)?;
                if vals.len() != d * d {
                    return Err(bad(format!("layer {k}: dense rotation needs {} entries", d * d)));
                }
                let m = DMatrix::from_row_slice(d, d, &vals);
                let err = (&m * m.transpose() - DMatrix::<f64>::identity(d, d)).amax();
                if !(err <= ORTHOGONALITY_TOL) {
                    return Err(bad(format!("layer {k}: rotation is not orthogonal")));
                }
                Rotation::Dense(m)
            }
            RotationDoc::Householder { data } => {
                let mut vectors = Vec::with_capacity(data.len());
                for w in &data {
                    let w = dec(w)?;
                    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if w.len() != d || !((n - 1.0).abs() <= UNIT_NORM_TOL) {
                        return Err(bad(format!("layer {k}: bad Householder vector")));
                    }
                    vectors.push(w);
                }
                Rotation::Householder { dim: d, vectors }
            }
        };
        let map = match layer.map {
            MapDoc::Affine { params } => {
                let p = dec(&params)?;
                if p.len() != 2 * d || p.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("layer {k}: affine map needs {} finite params", 2 * d)));
                }
                let mut a = AffineMap::identity(d);
                a.set_params(&p);
                CoordMap::Affine(a)
            }
            MapDoc::Spline { knots, bound, params } => {
                let b = hexfloat::parse(&bound)?;
                let p = dec(&params)?;
                if knots < 2 || !(b > 0.0 && b.is_finite()) {
                    return Err(bad(format!("layer {k}: invalid spline knots/bound")));
                }
                if p.len() != d * (3 * knots - 1) || p.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("layer {k}: spline parameter count mismatch")));
                }
                CoordMap::Spline(RqSpline::from_params(d, knots, b, p))
            }
        };
        chain.push(TransportLayer::new(rotation, map));
    }
    Ok(chain)
}
