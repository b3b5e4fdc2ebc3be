//! Gather-excite operators.
//!
//! A gather aggregates each channel over windows of side `2e − 1` placed
//! every `e` pixels (or over the whole plane for a global extent); an excite
//! turns the aggregates into a sigmoid gate, resizes it back to the input
//! resolution by nearest-neighbour interpolation and multiplies it onto the
//! input. Squeeze-and-excitation is the global-average gather paired with a
//! channel-subnetwork excite.

mod unit;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use unit::{
    excite_direct, excite_subnet, gather_geometry, gather_pool, ChannelSubnet, DepthwiseGather, GateHook, GeOutput,
    GeUnit,
};

pub const DEFAULT_REDUCTION: usize = 16;

/// Spatial extent of a gather.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extent {
    /// Downsample by `e`: output `(⌈H/e⌉, ⌈W/e⌉)`.
    Ratio(usize),
    /// One aggregate per channel.
    Global,
}

impl Extent {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Extent::Ratio(e) if e < 2 || !e.is_power_of_two() => Err(Error::config(format!(
                "extent ratio must be a power of two >= 2, got {e}"
            ))),
            _ => Ok(()),
        }
    }

    /// Spatial size of the gathered tensor.
    pub fn gathered(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            Extent::Ratio(e) => (h.div_ceil(e), w.div_ceil(e)),
            Extent::Global => (1, 1),
        }
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Ratio(e) => write!(f, "e{e}"),
            Extent::Global => f.write_str("global"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatherKind {
    AvgPool,
    MaxPool,
    /// Learned: chained stride-2 depth-wise 3×3 convolutions, or a single
    /// plane-sized depth-wise convolution for the global extent.
    DepthwiseConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExciteKind {
    /// Gate = σ(interp(x̂)).
    Direct,
    /// Gate = σ(interp(f(x̂))) with f a 1×1 conv bottleneck `C → ⌈C/r⌉ → C`.
    ChannelSubnet { reduction: usize },
}

/// Hidden width of the channel subnetwork, never below one.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

/// Named members of the operator family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Parameter-free pooling gather, direct excite.
    ThetaMinus,
    /// Depth-wise gather, direct excite.
    Theta,
    /// Depth-wise gather, channel-subnetwork excite.
    ThetaPlus,
    /// Global average gather, channel-subnetwork excite.
    SqueezeExcite,
    /// Pooling gather at a non-global extent with a subnetwork excite.
    Other,
}

/// Gather/excite choice without geometry; placements stamp it onto blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeTemplate {
    pub extent: Extent,
    pub gather: GatherKind,
    pub excite: ExciteKind,
}

impl GeTemplate {
    pub fn theta_minus(extent: Extent) -> Self {
        GeTemplate {
            extent,
            gather: GatherKind::AvgPool,
            excite: ExciteKind::Direct,
        }
    }

    pub fn theta_minus_max(extent: Extent) -> Self {
        GeTemplate {
            gather: GatherKind::MaxPool,
            ..Self::theta_minus(extent)
        }
    }

    pub fn theta(extent: Extent) -> Self {
        GeTemplate {
            extent,
            gather: GatherKind::DepthwiseConv,
            excite: ExciteKind::Direct,
        }
    }

    pub fn theta_plus(extent: Extent, reduction: usize) -> Self {
        GeTemplate {
            extent,
            gather: GatherKind::DepthwiseConv,
            excite: ExciteKind::ChannelSubnet { reduction },
        }
    }

    pub fn squeeze_excite(reduction: usize) -> Self {
        GeTemplate {
            extent: Extent::Global,
            gather: GatherKind::AvgPool,
            excite: ExciteKind::ChannelSubnet { reduction },
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.gather, self.excite, self.extent) {
            (GatherKind::AvgPool | GatherKind::MaxPool, ExciteKind::Direct, _) => Variant::ThetaMinus,
            (GatherKind::DepthwiseConv, ExciteKind::Direct, _) => Variant::Theta,
            (GatherKind::DepthwiseConv, ExciteKind::ChannelSubnet { .. }, _) => Variant::ThetaPlus,
            (GatherKind::AvgPool, ExciteKind::ChannelSubnet { .. }, Extent::Global) => Variant::SqueezeExcite,
            _ => Variant::Other,
        }
    }

    /// True when the unit registers no learnable parameters.
    pub fn is_parameter_free(&self) -> bool {
        self.variant() == Variant::ThetaMinus
    }

    pub fn validate(&self) -> Result<()> {
        self.extent.validate()?;
        if let ExciteKind::ChannelSubnet { reduction: 0 } = self.excite {
            return Err(Error::config("channel subnetwork reduction must be >= 1"));
        }
        Ok(())
    }

    pub fn at(&self, channels: usize, height: usize, width: usize) -> GeUnitConfig {
        GeUnitConfig {
            extent: self.extent,
            gather: self.gather,
            excite: self.excite,
            channels,
            height,
            width,
        }
    }
}

/// Full description of one unit, including the geometry of its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeUnitConfig {
    pub extent: Extent,
    pub gather: GatherKind,
    pub excite: ExciteKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GeUnitConfig {
    pub fn template(&self) -> GeTemplate {
        GeTemplate {
            extent: self.extent,
            gather: self.gather,
            excite: self.excite,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.template().validate()?;
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("GE unit needs non-empty input geometry"));
        }
        if let Extent::Ratio(e) = self.extent {
            if self.height < e || self.width < e {
                return Err(Error::config(format!(
                    "extent ratio {e} exceeds spatial size {}x{}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn gathered(&self) -> (usize, usize) {
        self.extent.gathered(self.height, self.width)
    }
}

/// The input positions read by gather output `u` (1-based, both axes) at
/// extent ratio `e`: a `(2e−1)²` square centred on `e·u`, clipped to a
/// `grid.0 × grid.1` input indexed from 1. Returned in row-major order.
pub fn selection_window(u: (usize, usize), e: usize, grid: (usize, usize)) -> Vec<(usize, usize)> {
    let half = ((2 * e).saturating_sub(1) / 2) as isize;
    let mut out = Vec::new();
    let (cy, cx) = ((e * u.0) as isize, (e * u.1) as isize);
    for dy in -half..=half {
        for dx in -half..=half {
            let (y, x) = (cy + dy, cx + dx);
            if y >= 1 && x >= 1 && y <= grid.0 as isize && x <= grid.1 as isize {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_window() {
        assert_eq!(selection_window((1, 1), 1, (5, 5)), vec![(1, 1)]);
    }

    #[test]
    fn e2_window_is_three_by_three_at_two_two() {
        let w = selection_window((1, 1), 2, (8, 8));
        assert_eq!(w.len(), 9);
        assert_eq!(w.first(), Some(&(1, 1)));
        assert_eq!(w.last(), Some(&(3, 3)));
    }

    #[test]
    fn e4_window_from_formula() {
        let w = selection_window((2, 3), 4, (16, 16));
        let mut want = Vec::new();
        for y in 8 - 3..=8 + 3 {
            for x in 12 - 3..=12 + 3 {
                want.push((y, x));
            }
        }
        assert_eq!(w, want);
    }

    #[test]
    fn extents_validate() {
        assert!(Extent::Ratio(3).validate().is_err());
        assert!(Extent::Ratio(1).validate().is_err());
        assert!(Extent::Ratio(8).validate().is_ok());
        assert_eq!(Extent::Ratio(8).gathered(56, 56), (7, 7));
        assert_eq!(Extent::Ratio(4).gathered(17, 9), (5, 3));
    }

    #[test]
    fn variant_mapping() {
        assert_eq!(GeTemplate::theta_minus(Extent::Global).variant(), Variant::ThetaMinus);
        assert_eq!(
            GeTemplate::theta_minus_max(Extent::Ratio(2)).variant(),
            Variant::ThetaMinus
        );
        assert_eq!(GeTemplate::theta(Extent::Ratio(4)).variant(), Variant::Theta);
        assert_eq!(GeTemplate::theta_plus(Extent::Global, 16).variant(), Variant::ThetaPlus);
        assert_eq!(GeTemplate::squeeze_excite(16).variant(), Variant::SqueezeExcite);
        assert!(GeTemplate::theta_minus(Extent::Ratio(8)).is_parameter_free());
        assert!(!GeTemplate::squeeze_excite(16).is_parameter_free());
    }

    #[test]
    fn hidden_width_has_floor_of_one() {
        assert_eq!(hidden_width(2048, 16), 128);
        assert_eq!(hidden_width(16, 16), 1);
        assert_eq!(hidden_width(8, 16), 1);
        assert_eq!(hidden_width(40, 16), 3);
    }

    #[test]
    fn unit_config_rejects_extent_beyond_plane() {
        let cfg = GeTemplate::theta_minus(Extent::Ratio(8)).at(4, 7, 7);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
