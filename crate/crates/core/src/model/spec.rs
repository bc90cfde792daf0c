use std::fmt;
use std::str::FromStr;

use super::ModelConfig;
use crate::{Error, Result};

/// Shape of one sub-Transformer: the shared input-output width `C` and one
/// attention width per layer (encoder layers first, then decoder layers).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WidthSpec {
    pub io_width: usize,
    pub attn_widths: Vec<usize>,
}

impl WidthSpec {
    /// Every layer at `width`.
    pub fn type1(config: &ModelConfig, width: usize) -> Self {
        WidthSpec {
            io_width: width,
            attn_widths: vec![width; config.n_layers()],
        }
    }

    pub fn widest(config: &ModelConfig) -> Self {
        WidthSpec::type1(config, config.max_width)
    }

    /// `C = max_width` with free per-layer attention widths.
    pub fn type2(config: &ModelConfig, attn_widths: Vec<usize>) -> Self {
        WidthSpec {
            io_width: config.max_width,
            attn_widths,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.attn_widths.len() != config.n_layers() {
            return Err(Error::Spec(format!(
                "{} attention widths for {} layers",
                self.attn_widths.len(),
                config.n_layers()
            )));
        }
        for &w in std::iter::once(&self.io_width).chain(&self.attn_widths) {
            if config.menu_index(w).is_none() {
                return Err(Error::Spec(format!(
                    "width {w} is not in the menu {:?}",
                    config.width_menu
                )));
            }
        }
        Ok(())
    }

    pub fn is_type1(&self) -> bool {
        self.attn_widths.iter().all(|&d| d == self.io_width)
    }

    pub fn is_type2(&self, config: &ModelConfig) -> bool {
        self.io_width == config.max_width
    }

    pub fn is_widest(&self, config: &ModelConfig) -> bool {
        self.io_width == config.max_width && self.attn_widths.iter().all(|&d| d == config.max_width)
    }

    pub fn encoder_widths<'a>(&'a self, config: &ModelConfig) -> &'a [usize] {
        &self.attn_widths[..config.n_encoder_layers]
    }

    pub fn decoder_widths<'a>(&'a self, config: &ModelConfig) -> &'a [usize] {
        &self.attn_widths[config.n_encoder_layers..]
    }

    /// True when every width of `self` is at most the matching width of
    /// `other`, so `self`'s active parameters are a subset of `other`'s.
    pub fn nested_in(&self, other: &WidthSpec) -> bool {
        self.io_width <= other.io_width
            && self.attn_widths.len() == other.attn_widths.len()
            && self
                .attn_widths
                .iter()
                .zip(&other.attn_widths)
                .all(|(a, b)| a <= b)
    }

    /// Dropout rate for this sub-model: the io width's rate for type-1
    /// specs, otherwise the rate at the floored mean menu index of the
    /// attention widths.
    pub fn dropout_rate(&self, config: &ModelConfig) -> Result<f64> {
        self.validate(config)?;
        if self.is_type1() {
            return Ok(config.dropout_for_width(self.io_width).unwrap_or(0.0));
        }
        let total: usize = self
            .attn_widths
            .iter()
            .map(|&w| config.menu_index(w).unwrap_or(0))
            .sum();
        Ok(config.dropout[total / self.attn_widths.len()])
    }
}

impl fmt::Display for WidthSpec {
    /// `C:D1,D2,...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.io_width)?;
        for (i, d) in self.attn_widths.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for WidthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (io, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Spec(format!("expected `C:D1,...`, got {s:?}")))?;
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Spec(format!("{t:?}: {e}")))
        };
        Ok(WidthSpec {
            io_width: num(io)?,
            attn_widths: rest.split(',').map(num).collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let spec: WidthSpec = "256:64,128,192,256".parse().unwrap();
        assert_eq!(spec.io_width, 256);
        assert_eq!(spec.attn_widths, vec![64, 128, 192, 256]);
        assert_eq!(spec.to_string(), "256:64,128,192,256");
        assert!("256".parse::<WidthSpec>().is_err());
        assert!("256:a".parse::<WidthSpec>().is_err());
    }

    #[test]
    fn classification_and_validation() {
        let c = ModelConfig::toy(64);
        let t1 = WidthSpec::type1(&c, 128);
        assert!(t1.is_type1() && !t1.is_type2(&c));
        t1.validate(&c).unwrap();
        let t2 = WidthSpec::type2(&c, vec![64, 256, 128, 192]);
        assert!(t2.is_type2(&c) && !t2.is_type1());
        assert!(WidthSpec::widest(&c).is_type1() && WidthSpec::widest(&c).is_type2(&c));
        assert!(WidthSpec::type1(&c, 100).validate(&c).is_err());
        assert!(WidthSpec::type2(&c, vec![64; 3]).validate(&c).is_err());
    }

    #[test]
    fn dropout_rules() {
        let mut c = ModelConfig::toy(64);
        c.dropout = vec![0.0, 0.1, 0.2, 0.3];
        assert_eq!(WidthSpec::type1(&c, 192).dropout_rate(&c).unwrap(), 0.2);
        // menu indices 0,1,3,3 -> mean 1.75 -> index 1
        let t2 = WidthSpec::type2(&c, vec![64, 128, 256, 256]);
        assert_eq!(t2.dropout_rate(&c).unwrap(), 0.1);
    }

    #[test]
    fn nesting() {
        let c = ModelConfig::toy(64);
        let small = WidthSpec::type1(&c, 64);
        let big = WidthSpec::type2(&c, vec![64, 128, 64, 256]);
        assert!(small.nested_in(&big));
        assert!(!big.nested_in(&small));
        assert!(big.nested_in(&WidthSpec::widest(&c)));
    }
}
