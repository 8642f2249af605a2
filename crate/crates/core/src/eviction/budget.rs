use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::headlevel::allocate_headlevel;
use crate::error::{Error, Result};
use crate::kvcache::EvictionMask;
use crate::scoring::{HeadScore, ScoreTensor};
use crate::tinylm::Role;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// Top pairs per layer, pooled across heads.
    #[default]
    Nonuniform,
    /// Same count for every head.
    Uniform,
    /// Whole heads kept in full or reduced to sink + recent window.
    Headlevel,
}

impl BudgetMode {
    pub const ALL: [BudgetMode; 3] = [BudgetMode::Nonuniform, BudgetMode::Uniform, BudgetMode::Headlevel];

    pub fn name(self) -> &'static str {
        match self {
            BudgetMode::Nonuniform => "nonuniform",
            BudgetMode::Uniform => "uniform",
            BudgetMode::Headlevel => "headlevel",
        }
    }
}

impl fmt::Display for BudgetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown budget mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub ratio: f64,
    pub mode: BudgetMode,
    pub sink: usize,
    pub window: usize,
    pub protect_system: bool,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            mode: BudgetMode::Nonuniform,
            sink: 4,
            window: 12,
            protect_system: true,
        }
    }
}

impl BudgetSpec {
    pub fn new(ratio: f64, mode: BudgetMode) -> Self {
        Self {
            ratio,
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)
    }
}

pub(crate) fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("ratio must lie in (0, 1], got {r}")))
    }
}

/// `⌈r · n⌉`, tolerant of products like `0.7 · 10` landing a hair above an
/// integer in binary floating point.
pub fn ceil_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let rounded = x.round();
    let k = if (x - rounded).abs() <= 1e-9 * x.max(1.0) {
        rounded
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Selection order within a candidate set: pinned first, then higher score,
/// then lower `(head, position)`.
fn rank(s: &ScoreTensor, layer: usize, a: (usize, usize), b: (usize, usize)) -> Ordering {
    let pa = s.is_pinned(a.1);
    let pb = s.is_pinned(b.1);
    pb.cmp(&pa)
        .then_with(|| s.get(layer, b.0, b.1).total_cmp(&s.get(layer, a.0, a.1)))
        .then_with(|| a.cmp(&b))
}

/// Per layer, keep the `⌈r·H·n_c⌉` best pairs across that layer's heads.
pub fn allocate_nonuniform(s: &ScoreTensor, r: f64) -> Result<EvictionMask> {
    check_ratio(r)?;
    let (h_n, n) = (s.n_kv_heads(), s.len());
    let mut mask = EvictionMask::filled(s.n_layers(), h_n, n, false);
    let k = ceil_count(r, h_n * n);
    for l in 0..s.n_layers() {
        let mut cand: Vec<(usize, usize)> = (0..h_n).flat_map(|h| (0..n).map(move |p| (h, p))).collect();
        cand.sort_by(|&a, &b| rank(s, l, a, b));
        for &(h, p) in &cand[..k] {
            mask.set(l, h, p, true);
        }
    }
    Ok(mask)
}

/// Keep the `⌈r·n_c⌉` best pairs of every head.
pub fn allocate_uniform(s: &ScoreTensor, r: f64) -> Result<EvictionMask> {
    check_ratio(r)?;
    let (h_n, n) = (s.n_kv_heads(), s.len());
    let mut mask = EvictionMask::filled(s.n_layers(), h_n, n, false);
    let k = ceil_count(r, n);
    for l in 0..s.n_layers() {
        for h in 0..h_n {
            let mut cand: Vec<(usize, usize)> = (0..n).map(|p| (h, p)).collect();
            cand.sort_by(|&a, &b| rank(s, l, a, b));
            for &(_, p) in &cand[..k] {
                mask.set(l, h, p, true);
            }
        }
    }
    Ok(mask)
}

/// Build the keep-mask for `spec`. Head-level mode ranks heads by `head`
/// when given, else by the per-head maxima of `s`. System positions are
/// added on top of the budget when `spec.protect_system` is set.
pub fn allocate(s: &ScoreTensor, head: Option<&HeadScore>, spec: &BudgetSpec, roles: &[Role]) -> Result<EvictionMask> {
    spec.validate()?;
    if roles.len() != s.len() {
        return Err(crate::error::contract(format!(
            "{} role tags for {} scored positions",
            roles.len(),
            s.len()
        )));
    }
    let mut mask = match spec.mode {
        BudgetMode::Nonuniform => allocate_nonuniform(s, spec.ratio)?,
        BudgetMode::Uniform => allocate_uniform(s, spec.ratio)?,
        BudgetMode::Headlevel => {
            let own;
            let head = match head {
                Some(h) => h,
                None => {
                    own = crate::scoring::aggregate_head(s);
                    &own
                }
            };
            allocate_headlevel(head, spec.ratio, spec.sink, spec.window, s.len())?.to_mask(s.len())
        }
    };
    if spec.protect_system {
        mask.protect_roles(roles, Role::System);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMethod;

    fn tensor(h: usize, n: usize, f: impl Fn(usize, usize) -> f32) -> ScoreTensor {
        let v = (0..h)
            .flat_map(|hh| (0..n).map(move |p| (hh, p)))
            .map(|(hh, p)| f(hh, p))
            .collect();
        ScoreTensor::from_vec(1, h, n, v, ScoreMethod::Kvzip).unwrap()
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let s = tensor(3, 7, |h, p| (h * 7 + p) as f32 * 0.01);
        assert_eq!(allocate_nonuniform(&s, 1.0).unwrap().total_kept(), 21);
        assert_eq!(allocate_uniform(&s, 1.0).unwrap().total_kept(), 21);
    }

    #[test]
    fn nonuniform_count_uses_ceiling() {
        let s = tensor(8, 163, |h, p| ((h * 31 + p * 17) % 101) as f32);
        let m = allocate_nonuniform(&s, 0.3).unwrap();
        assert_eq!(m.kept_in_layer(0), 392);
    }

    #[test]
    fn uniform_count_uses_ceiling() {
        let s = tensor(2, 10, |h, p| (h + p) as f32);
        let m = allocate_uniform(&s, 0.25).unwrap();
        assert_eq!(m.kept(0, 0), 3);
        assert_eq!(m.kept(0, 1), 3);
    }

    #[test]
    fn ties_go_to_lower_head_then_position() {
        let s = tensor(2, 3, |_, _| 0.5);
        let m = allocate_nonuniform(&s, 0.5).unwrap();
        assert_eq!(m.row(0, 0), &[true, true, true]);
        assert_eq!(m.row(0, 1), &[false, false, false]);
    }

    #[test]
    fn pinned_positions_rank_first() {
        let mut s = tensor(1, 6, |_, p| p as f32);
        s.pinned = vec![0];
        let m = allocate_uniform(&s, 0.34).unwrap();
        assert_eq!(m.row(0, 0), &[true, false, false, false, true, true]);
    }

    #[test]
    fn float_products_do_not_overshoot() {
        assert_eq!(ceil_count(0.7, 10), 7);
        assert_eq!(ceil_count(0.3, 8 * 163), 392);
        assert_eq!(ceil_count(0.25, 10), 3);
        assert_eq!(ceil_count(1.0, 5), 5);
    }

    #[test]
    fn bad_ratio_is_a_config_error() {
        let s = tensor(1, 4, |_, p| p as f32);
        for r in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(allocate_nonuniform(&s, r), Err(Error::Config(_))));
        }
    }

    #[test]
    fn system_positions_are_added() {
        let s = tensor(2, 4, |_, p| p as f32);
        let roles = [Role::System, Role::Context, Role::Context, Role::Context];
        let m = allocate(&s, None, &BudgetSpec::new(0.25, BudgetMode::Nonuniform), &roles).unwrap();
        assert!(m.retains_role(&roles, Role::System));
    }
}
