use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adhesim_core::binding::NodeSet;
use adhesim_core::config::Config;
use adhesim_core::measures::GridField;
use adhesim_core::Point;
use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

const AXES: [&str; 3] = ["x", "y", "z"];

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Rows sorted by coordinates, each row `coords.., values..`.
pub fn table(dim: usize, value_names: &[&str], mut rows: Vec<(Point, Vec<f64>)>) -> String {
    rows.sort_by(|a, b| {
        a.0[..dim]
            .iter()
            .zip(&b.0[..dim])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = AXES[..dim].join(",");
    for n in value_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (x, vals) in rows {
        let cells: Vec<String> = x[..dim].iter().chain(&vals).map(|v| num(*v)).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}

pub fn field_csv(u: &GridField, name: &str) -> String {
    let g = &u.grid;
    let rows = g.active_cells().map(|i| (g.center(i), vec![u.values[i]])).collect();
    table(g.dim(), &[name], rows)
}

pub fn nodes_csv(nodes: &NodeSet, columns: &[(&str, &[f64])]) -> String {
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    let rows = (0..nodes.len())
        .map(|i| (nodes.points[i], columns.iter().map(|c| c.1[i]).collect()))
        .collect();
    table(nodes.dim, &names, rows)
}

pub fn config_hash(cfg: &Config) -> String {
    let bytes = serde_json::to_vec(&cfg.to_value()).expect("configuration serialises");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub outputs: Vec<String>,
    pub summary: Value,
}

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &(text + "\n"))
    }

    pub fn finish(mut self, command: &str, cfg: Option<&Config>, summary: Value) -> Result<()> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: cfg.map(Config::to_value),
            config_hash: cfg.map(config_hash),
            outputs: std::mem::take(&mut self.written),
            summary,
        };
        self.write_json("manifest.json", &manifest)
    }
}
