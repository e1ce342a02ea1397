#![allow(dead_code)]

use adhesim_core::config::Config;
use serde_json::{json, Value};

/// Smooth binding kernels, low-density initial bump inside `B̄_{ρ/4}`.
pub fn coupled_value(dim: usize, h: f64, mass: f64) -> Value {
    json!({
        "schema": 1,
        "dimension": dim,
        "kernels": {
            "a_plus": 1.0, "a_minus": 1.0, "b_plus": 8.0, "b_minus": 8.0,
            "k_plus": { "type": "gaussian", "base": 3.0, "amplitude": 1.0, "width": 0.2 },
            "k_minus": { "type": "constant", "value": 1.0 }
        },
        "binding": { "rho": 0.3 },
        "solver": { "h": h, "chi": { "type": "saturating", "c": 1000.0 } },
        "initial": { "type": "bump", "radius": 0.075, "mass": mass },
        "run": { "t_end": 1.0 }
    })
}

pub fn build(v: Value) -> Config {
    Config::from_value(v).expect("valid configuration")
}

pub fn with(mut v: Value, overrides: &[&str]) -> Value {
    for o in overrides {
        Config::apply_override(&mut v, o).expect("override");
    }
    v
}
