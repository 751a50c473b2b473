use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::quantizer::Granularity;
use crate::error::{Error, Result};
use crate::io::kv::{parse_kv, parse_value};
use crate::netcore::NoisePredictor;

/// Bit widths at or above this are treated as full precision (quantizer
/// bypassed).
pub const BYPASS_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Bits(u32),
    Exempt,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Self {
        if bits >= BYPASS_BITS {
            Precision::Exempt
        } else {
            Precision::Bits(bits)
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match self {
            Precision::Bits(b) => Some(*b),
            Precision::Exempt => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Bits(b) => write!(f, "{b}"),
            Precision::Exempt => f.write_str("exempt"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exempt" {
            return Ok(Precision::Exempt);
        }
        let bits: u32 = parse_value("precision", s)?;
        if bits < 2 {
            return Err(Error::Config(format!("bit width {bits} below 2")));
        }
        Ok(Precision::from_bits(bits))
    }
}

/// Per-layer override of the global weight / activation precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LayerOverride {
    pub weight: Option<Precision>,
    pub act: Option<Precision>,
}

/// Quantization settings.
///
/// Text form (`key=value` lines):
/// * `bits_w`, `bits_a`: bit widths; 32 or more bypasses the quantizer
/// * `granularity_w`: `per-channel` (default) or `per-tensor`
/// * `override.<layer>`: `exempt` or a bit width, for weights and activations
/// * `override.<layer>.w`, `override.<layer>.a`: one side only
///
/// Nonlinearities and the time-embedding table always run at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub granularity_w: Granularity,
    pub layer_overrides: BTreeMap<String, LayerOverride>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits_w: 4,
            bits_a: 8,
            granularity_w: Granularity::PerChannel,
            layer_overrides: BTreeMap::new(),
        }
    }
}

impl QuantConfig {
    pub fn weights_only(bits_w: u32) -> Self {
        QuantConfig {
            bits_w,
            bits_a: BYPASS_BITS,
            ..Default::default()
        }
    }

    pub fn act_quant_enabled(&self) -> bool {
        self.bits_a < BYPASS_BITS
    }

    pub fn weight_precision(&self, layer: &str) -> Precision {
        self.layer_overrides
            .get(layer)
            .and_then(|o| o.weight)
            .unwrap_or(Precision::from_bits(self.bits_w))
    }

    pub fn act_precision(&self, layer: &str) -> Precision {
        if !self.act_quant_enabled() {
            return Precision::Exempt;
        }
        self.layer_overrides
            .get(layer)
            .and_then(|o| o.act)
            .unwrap_or(Precision::from_bits(self.bits_a))
    }

    /// Every override must name a layer of `model`.
    pub fn validate_for<T: crate::netcore::Real>(&self, model: &NoisePredictor<T>) -> Result<()> {
        for name in self.layer_overrides.keys() {
            if model.layer_index(name).is_none() {
                return Err(Error::Config(format!(
                    "override for unknown layer {name:?}"
                )));
            }
        }
        for bits in [self.bits_w, self.bits_a] {
            if bits < 2 {
                return Err(Error::Config(format!("bit width {bits} below 2")));
            }
        }
        Ok(())
    }

    /// Applies one key. Returns `Ok(false)` if the key is not a quantization
    /// key.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "bits_w" => self.bits_w = parse_value(key, value)?,
            "bits_a" => self.bits_a = parse_value(key, value)?,
            "granularity_w" => self.granularity_w = value.parse()?,
            _ => {
                let Some(rest) = key.strip_prefix("override.") else {
                    return Ok(false);
                };
                let prec: Precision = value.parse()?;
                let (layer, side) = match rest.rsplit_once('.') {
                    Some((layer, "w")) => (layer, Some(true)),
                    Some((layer, "a")) => (layer, Some(false)),
                    _ => (rest, None),
                };
                if layer.is_empty() {
                    return Err(Error::Config(format!(
                        "override key {key:?} names no layer"
                    )));
                }
                let entry = self.layer_overrides.entry(layer.to_string()).or_default();
                match side {
                    Some(true) => entry.weight = Some(prec),
                    Some(false) => entry.act = Some(prec),
                    None => {
                        entry.weight = Some(prec);
                        entry.act = Some(prec);
                    }
                }
            }
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = QuantConfig::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.apply_key(&k, &v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        Ok(cfg)
    }

    pub fn render_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("bits_w={}", self.bits_w),
            format!("bits_a={}", self.bits_a),
            format!("granularity_w={}", self.granularity_w),
        ];
        for (name, o) in &self.layer_overrides {
            match (o.weight, o.act) {
                (Some(w), Some(a)) if w == a => lines.push(format!("override.{name}={w}")),
                (w, a) => {
                    if let Some(w) = w {
                        lines.push(format!("override.{name}.w={w}"));
                    }
                    if let Some(a) = a {
                        lines.push(format!("override.{name}.a={a}"));
                    }
                }
            }
        }
        lines
    }

    pub fn render(&self) -> String {
        let mut s = self.render_lines().join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Arch;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "bits_w=4\nbits_a=8\noverride.block0.fc1=exempt\noverride.input_proj.a=8\noverride.output_proj.w=6\n";
        let cfg = QuantConfig::parse(text).unwrap();
        assert_eq!(cfg.weight_precision("block0.fc1"), Precision::Exempt);
        assert_eq!(cfg.act_precision("block0.fc1"), Precision::Exempt);
        assert_eq!(cfg.weight_precision("input_proj"), Precision::Bits(4));
        assert_eq!(cfg.weight_precision("output_proj"), Precision::Bits(6));
        assert_eq!(QuantConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_and_layer_rejected() {
        assert!(QuantConfig::parse("bitz_w=4").is_err());
        let cfg = QuantConfig::parse("override.nope=exempt").unwrap();
        let model = NoisePredictor::<f32>::zeros(Arch::default()).unwrap();
        assert!(cfg.validate_for(&model).is_err());
    }

    #[test]
    fn thirty_two_bits_bypass() {
        let cfg = QuantConfig::parse("bits_w=32\nbits_a=32").unwrap();
        assert!(!cfg.act_quant_enabled());
        assert_eq!(cfg.weight_precision("input_proj"), Precision::Exempt);
    }
}
