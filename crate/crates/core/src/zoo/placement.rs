use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::ge::{ExciteKind, Extent, GatherKind, GeTemplate, DEFAULT_REDUCTION};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageSel {
    All,
    Only(Vec<usize>),
}

/// Which stages receive a GE unit in every block, and which unit.
///
/// Text form `kind:extent:stages[:rN]`, e.g. `theta:e8:stage3,stage4` or
/// `se:global:all:r8`. Kinds: `theta-minus`, `theta-minus-max`, `theta`,
/// `theta-plus`, `se`. Extents: `global`, `e2`, `e4`, `e8`, ... The
/// reduction suffix only applies to `theta-plus` and `se` (default 16).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GePlacement {
    pub template: GeTemplate,
    pub stages: StageSel,
}

impl GePlacement {
    pub fn all(template: GeTemplate) -> Self {
        GePlacement {
            template,
            stages: StageSel::All,
        }
    }

    pub fn only(template: GeTemplate, stages: &[usize]) -> Self {
        GePlacement {
            template,
            stages: StageSel::Only(stages.to_vec()),
        }
    }

    pub fn covers(&self, stage: usize) -> bool {
        match &self.stages {
            StageSel::All => true,
            StageSel::Only(s) => s.contains(&stage),
        }
    }

    /// Fails when a selected stage does not exist in `arch` or a covered
    /// block's plane is smaller than the extent.
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        self.template.validate()?;
        if let StageSel::Only(stages) = &self.stages {
            let known = arch.stage_indices();
            if stages.is_empty() {
                return Err(Error::config("placement selects no stages"));
            }
            if let Some(s) = stages.iter().find(|s| !known.contains(s)) {
                return Err(Error::config(format!(
                    "stage{s} does not exist in {} (stages {})",
                    arch.family,
                    known.iter().map(|k| format!("stage{k}")).collect::<Vec<_>>().join(",")
                )));
            }
        }
        for b in arch.plan()?.blocks.iter().filter(|b| self.covers(b.stage)) {
            self.template
                .at(b.cout, b.out_hw.0, b.out_hw.1)
                .validate()
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", b.name)),
                    e => e,
                })?;
        }
        Ok(())
    }

    fn kind_name(&self) -> &'static str {
        match (self.template.gather, self.template.excite) {
            (GatherKind::AvgPool, ExciteKind::Direct) => "theta-minus",
            (GatherKind::MaxPool, ExciteKind::Direct) => "theta-minus-max",
            (GatherKind::DepthwiseConv, ExciteKind::Direct) => "theta",
            (GatherKind::DepthwiseConv, ExciteKind::ChannelSubnet { .. }) => "theta-plus",
            (GatherKind::AvgPool, ExciteKind::ChannelSubnet { .. }) => "se",
            (GatherKind::MaxPool, ExciteKind::ChannelSubnet { .. }) => "max-subnet",
        }
    }
}

impl FromStr for GePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::config(format!(
                "placement `{s}` is not of the form kind:extent:stages[:rN]"
            )));
        }
        let extent = match parts[1] {
            "global" => Extent::Global,
            e => {
                let ratio = e
                    .strip_prefix('e')
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| Error::config(format!("bad extent `{e}` (want global or eN)")))?;
                Extent::Ratio(ratio)
            }
        };
        let reduction = match parts.get(3) {
            None => None,
            Some(r) => Some(
                r.strip_prefix('r')
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|&r| r >= 1)
                    .ok_or_else(|| Error::config(format!("bad reduction `{r}` (want rN)")))?,
            ),
        };
        let r = reduction.unwrap_or(DEFAULT_REDUCTION);
        let template = match parts[0] {
            "theta-minus" => GeTemplate::theta_minus(extent),
            "theta-minus-max" => GeTemplate::theta_minus_max(extent),
            "theta" => GeTemplate::theta(extent),
            "theta-plus" => GeTemplate::theta_plus(extent, r),
            "se" if extent == Extent::Global => GeTemplate::squeeze_excite(r),
            "se" => return Err(Error::config("se placements use the global extent")),
            k => return Err(Error::config(format!("unknown GE kind `{k}`"))),
        };
        if reduction.is_some() && template.excite == ExciteKind::Direct {
            return Err(Error::config(format!(
                "`{}` has no channel subnetwork to reduce",
                parts[0]
            )));
        }
        let stages = match parts[2] {
            "all" => StageSel::All,
            list => StageSel::Only(
                list.split(',')
                    .map(|t| {
                        t.strip_prefix("stage")
                            .and_then(|n| n.parse::<usize>().ok())
                            .ok_or_else(|| Error::config(format!("bad stage `{t}` (want stageN)")))
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        template.validate()?;
        Ok(GePlacement { template, stages })
    }
}

impl TryFrom<String> for GePlacement {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GePlacement> for String {
    fn from(p: GePlacement) -> String {
        p.to_string()
    }
}

impl fmt::Display for GePlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:", self.kind_name(), self.template.extent)?;
        match &self.stages {
            StageSel::All => f.write_str("all")?,
            StageSel::Only(s) => {
                let list: Vec<String> = s.iter().map(|s| format!("stage{s}")).collect();
                f.write_str(&list.join(","))?
            }
        }
        if let ExciteKind::ChannelSubnet { reduction } = self.template.excite {
            if reduction != DEFAULT_REDUCTION {
                write!(f, ":r{reduction}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_examples() {
        let p: GePlacement = "theta:e8:stage3,stage4".parse().unwrap();
        assert_eq!(p.template, GeTemplate::theta(Extent::Ratio(8)));
        assert_eq!(p.stages, StageSel::Only(vec![3, 4]));
        let p: GePlacement = "se:global:all:r8".parse().unwrap();
        assert_eq!(p.template, GeTemplate::squeeze_excite(8));
        let p: GePlacement = "theta-plus:global:stage2".parse().unwrap();
        assert_eq!(p.template, GeTemplate::theta_plus(Extent::Global, 16));
    }

    #[test]
    fn display_round_trips() {
        for s in [
            "theta-minus:e2:all",
            "theta-minus-max:global:stage2",
            "theta:e4:stage3,stage5",
            "theta-plus:global:all",
            "se:global:all:r4",
        ] {
            assert_eq!(s.parse::<GePlacement>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn rejects_malformed() {
        for s in [
            "theta",
            "theta:e3:all",
            "theta:global:stage",
            "se:e2:all",
            "theta:global:all:r4",
            "gamma:global:all",
            "theta-plus:global:all:r0",
        ] {
            assert!(matches!(s.parse::<GePlacement>(), Err(Error::Config(_))), "{s}");
        }
    }

    #[test]
    fn stage_validation() {
        let p: GePlacement = "theta:global:stage5".parse().unwrap();
        assert!(p.validate(&ArchSpec::preset("resnet50").unwrap()).is_ok());
        assert!(p.validate(&ArchSpec::preset("cifar-resnet-110").unwrap()).is_err());
    }
}
