//! Plain-text model checkpoints.
//!
//! ```text
//! cie-checkpoint v1
//! fingerprint <sha256 hex of the JSON-encoded ModelConfig>
//! config <the JSON-encoded ModelConfig on one line>
//! params <count>
//! param <name> <rows> <cols>
//! <rows lines of cols whitespace-separated values>
//! …
//! ```
//!
//! Values use shortest round-trip float formatting, so a reload reproduces
//! every parameter bit for bit. Loading rebuilds the model from the stored
//! config and refuses files whose fingerprint, names or shapes disagree.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{CieModel, ModelConfig};
use crate::{seeded_rng, CieError, Matrix, Result};

const MAGIC: &str = "cie-checkpoint v1";

/// SHA-256 of the config's JSON encoding, hex encoded.
pub fn fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("model config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn to_text(model: &CieModel) -> String {
    let mut s = String::new();
    let json = serde_json::to_string(&model.config).expect("model config serializes");
    writeln!(s, "{MAGIC}").unwrap();
    writeln!(s, "fingerprint {}", fingerprint(&model.config)).unwrap();
    writeln!(s, "config {json}").unwrap();
    writeln!(s, "params {}", model.params.len()).unwrap();
    for p in model.params.iter() {
        let (r, c) = p.data.dim();
        writeln!(s, "param {} {r} {c}", p.name).unwrap();
        for row in p.data.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
    }
    s
}

pub fn from_text(text: &str, origin: &Path) -> Result<CieModel> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let err = |line: usize, detail: String| CieError::Parse {
        path: origin.to_path_buf(),
        line,
        detail,
    };
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    };
    let (n, l) = next("header")?;
    if l != MAGIC {
        return Err(err(n, format!("expected `{MAGIC}`")));
    }
    let (n, l) = next("fingerprint")?;
    let fp = l.strip_prefix("fingerprint ").ok_or_else(|| err(n, "expected fingerprint".into()))?;
    let (n, l) = next("config")?;
    let json = l.strip_prefix("config ").ok_or_else(|| err(n, "expected config".into()))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| err(n, e.to_string()))?;
    if fingerprint(&config) != fp {
        return Err(CieError::Validation(format!(
            "{}: config does not match its fingerprint",
            origin.display()
        )));
    }
    let (n, l) = next("parameter count")?;
    let count: usize = l
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| err(n, "expected `params <count>`".into()))?;

    let mut model = CieModel::new(config, &mut seeded_rng(0))?;
    if count != model.params.len() {
        return Err(CieError::Validation(format!(
            "{}: {count} parameters stored, model has {}",
            origin.display(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let (n, l) = next("parameter header")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let ["param", name, r, c] = toks[..] else {
            return Err(err(n, "expected `param <name> <rows> <cols>`".into()));
        };
        let shape = (
            r.parse::<usize>().map_err(|_| err(n, format!("bad row count `{r}`")))?,
            c.parse::<usize>().map_err(|_| err(n, format!("bad column count `{c}`")))?,
        );
        let p = model.params.get_mut(id);
        if name != p.name || shape != p.data.dim() {
            return Err(CieError::Validation(format!(
                "{}:{n}: stored `{name}` {shape:?}, model expects `{}` {:?}",
                origin.display(),
                p.name,
                p.data.dim()
            )));
        }
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for _ in 0..shape.0 {
            let (n, l) = next("parameter row")?;
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(n, format!("bad value `{t}`"))))
                .collect::<Result<_>>()?;
            if row.len() != shape.1 {
                return Err(err(n, format!("expected {} values, found {}", shape.1, row.len())));
            }
            data.extend(row);
        }
        p.data = Matrix::from_shape_vec(shape, data).expect("shape checked");
    }
    Ok(model)
}

pub fn save(model: &CieModel, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)).map_err(|e| CieError::io(path, e))
}

pub fn load(path: &Path) -> Result<CieModel> {
    let text = fs::read_to_string(path).map_err(|e| CieError::io(path, e))?;
    from_text(&text, path)
}
