use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, WidthSpec};
use crate::{Error, Result};

/// Width regime of sampled sub-models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Type1,
    Type2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Type1 => "type1",
            Variant::Type2 => "type2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Variant::Type1),
            "type2" => Ok(Variant::Type2),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// One uniform draw: a single width for every layer (type-1), or `C` fixed
/// at the widest and each attention width drawn independently (type-2).
pub fn sample_submodel<R: Rng + ?Sized>(config: &ModelConfig, variant: Variant, rng: &mut R) -> WidthSpec {
    match variant {
        Variant::Type1 => WidthSpec::type1(config, *config.width_menu.choose(rng).expect("menu is non-empty")),
        Variant::Type2 => {
            let widths = (0..config.n_layers())
                .map(|_| *config.width_menu.choose(rng).expect("menu is non-empty"))
                .collect();
            WidthSpec::type2(config, widths)
        }
    }
}

/// Type-2 draw restricted to `menu` (a subset of the config's menu).
pub fn sample_type2_from<R: Rng + ?Sized>(config: &ModelConfig, menu: &[usize], rng: &mut R) -> Result<WidthSpec> {
    check_subset(config, menu)?;
    let widths = (0..config.n_layers())
        .map(|_| *menu.choose(rng).expect("checked non-empty"))
        .collect();
    Ok(WidthSpec::type2(config, widths))
}

pub(crate) fn check_subset(config: &ModelConfig, menu: &[usize]) -> Result<()> {
    if menu.is_empty() {
        return Err(Error::invalid("empty width subset"));
    }
    if let Some(w) = menu.iter().find(|&&w| config.menu_index(w).is_none()) {
        return Err(Error::invalid(format!(
            "width {w} is not in the menu {:?}",
            config.width_menu
        )));
    }
    Ok(())
}

/// Number of distinct non-widest specs a variant can produce.
pub fn non_widest_count(config: &ModelConfig, variant: Variant) -> u128 {
    let menu = config.width_menu.len() as u128;
    match variant {
        Variant::Type1 => menu - 1,
        Variant::Type2 => menu.saturating_pow(config.n_layers() as u32) - 1,
    }
}

/// Up to `n` distinct specs, never the widest, in draw order. Fewer come
/// back only when the variant has fewer than `n` candidates.
pub fn sample_distinct<R: Rng + ?Sized>(
    config: &ModelConfig,
    variant: Variant,
    n: usize,
    rng: &mut R,
) -> Vec<WidthSpec> {
    let n = (n as u128).min(non_widest_count(config, variant)) as usize;
    if variant == Variant::Type1 {
        let mut widths: Vec<usize> = config
            .width_menu
            .iter()
            .copied()
            .filter(|&w| w != config.max_width)
            .collect();
        widths.shuffle(rng);
        return widths[..n].iter().map(|&w| WidthSpec::type1(config, w)).collect();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let spec = sample_submodel(config, variant, rng);
        if !spec.is_widest(config) && seen.insert(spec.clone()) {
            out.push(spec);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn type2_never_moves_io_width() {
        let cfg = ModelConfig::wmt_big(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = sample_submodel(&cfg, Variant::Type2, &mut rng);
            assert_eq!(s.io_width, 1024);
            s.validate(&cfg).unwrap();
        }
        assert_eq!(non_widest_count(&cfg, Variant::Type2) + 1, 13u128.pow(12));
    }

    #[test]
    fn restricted_menu() {
        let cfg = ModelConfig::wmt_big(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = sample_type2_from(&cfg, &[896, 960, 1024], &mut rng).unwrap();
            assert!(s.attn_widths.iter().all(|d| [896, 960, 1024].contains(d)));
        }
        assert!(sample_type2_from(&cfg, &[100], &mut rng).is_err());
        assert!(sample_type2_from(&cfg, &[], &mut rng).is_err());
    }

    #[test]
    fn type1_is_uniform() {
        let cfg = ModelConfig::toy(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            let s = sample_submodel(&cfg, Variant::Type1, &mut rng);
            assert!(s.is_type1());
            counts[cfg.menu_index(s.io_width).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn distinct_draws_skip_widest() {
        let cfg = ModelConfig::toy(16);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t1 = sample_distinct(&cfg, Variant::Type1, 10, &mut rng);
        assert_eq!(t1.len(), 3);
        assert!(t1.iter().all(|s| !s.is_widest(&cfg)));
        let t2 = sample_distinct(&cfg, Variant::Type2, 50, &mut rng);
        let set: BTreeSet<_> = t2.iter().collect();
        assert_eq!(set.len(), 50);
    }
}
