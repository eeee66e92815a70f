use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and training recipe. The JSON form uses these field names verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub atoms_dpl3: usize,
    pub atoms_dpl6: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub no_dpl_layers: bool,
    pub stop_recon_grad_at_x: bool,
    pub class_count: usize,
    /// Side of the square input image.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Use an all-true C4 connectivity table instead of the LeNet-5 one.
    #[serde(default)]
    pub c4_full_connectivity: bool,
    /// Block order conv -> pool -> ReLU instead of conv -> ReLU -> pool.
    #[serde(default)]
    pub pool_before_relu: bool,
}

fn default_input_size() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            atoms_dpl3: 1024,
            atoms_dpl6: 1024,
            beta: 1e-4,
            gamma: 1.0,
            lr: 3e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            no_dpl_layers: false,
            stop_recon_grad_at_x: false,
            class_count: 10,
            input_size: default_input_size(),
            c4_full_connectivity: false,
            pool_before_relu: false,
        }
    }
}

/// Spatial sizes through the stack for a given input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub input: usize,
    pub c1: usize,
    pub p2: usize,
    pub c4: usize,
    pub p5: usize,
}

impl Geometry {
    pub fn for_input(input: usize) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "input_size {input} does not fit the C1/P2/C4/P5 stack"
            ))
        };
        let c1 = input
            .checked_sub(4)
            .filter(|&v| v > 0 && v % 2 == 0)
            .ok_or_else(bad)?;
        let p2 = c1 / 2;
        let c4 = p2
            .checked_sub(4)
            .filter(|&v| v > 0 && v % 2 == 0)
            .ok_or_else(bad)?;
        Ok(Self {
            input,
            c1,
            p2,
            c4,
            p5: c4 / 2,
        })
    }

    pub fn flat_features(&self) -> usize {
        16 * self.p5 * self.p5
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.atoms_dpl3 == 0 || self.atoms_dpl6 == 0 {
            return err("atom counts must be positive".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return err(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return err(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.class_count < 2 {
            return err("class_count must be at least 2".into());
        }
        Geometry::for_input(self.input_size)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::for_input(self.input_size)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fields that determine parameter shapes; two configs agreeing here can share weights.
    pub fn architecture_mismatch(&self, other: &Self) -> Option<String> {
        let mut diffs = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    diffs.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(no_dpl_layers, class_count, input_size, c4_full_connectivity);
        if !self.no_dpl_layers && !other.no_dpl_layers {
            cmp!(atoms_dpl3, atoms_dpl6);
        }
        (!diffs.is_empty()).then(|| diffs.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_identical() {
        let cfg = ModelConfig {
            beta: 1e-4,
            gamma: 0.3,
            lr: 0.0003,
            seed: 123456789012345,
            ..Default::default()
        };
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn optional_keys_default_and_unknown_keys_fail() {
        let mut v = serde_json::to_value(ModelConfig::default()).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("input_size");
        obj.remove("pool_before_relu");
        let cfg = ModelConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.input_size, 32);
        v.as_object_mut()
            .unwrap()
            .insert("momentum".into(), 0.9.into());
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn validation() {
        let neg_beta = ModelConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(matches!(neg_beta.validate(), Err(Error::Config(_))));
        assert!(ModelConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            input_size: 8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            input_size: 16,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn geometry_of_table_one() {
        let g = Geometry::for_input(32).unwrap();
        assert_eq!((g.c1, g.p2, g.c4, g.p5), (28, 14, 10, 5));
        assert_eq!(g.flat_features(), 400);
        assert_eq!(Geometry::for_input(16).unwrap().flat_features(), 16);
    }
}
