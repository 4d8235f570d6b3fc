//! Ablation presets.

use std::str::FromStr;

use zoomnet_core::anchors::AnchorSpec;
use zoomnet_core::network::{Attention, Topology};
use zoomnet_core::train::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Plain down-sampling network, every anchor on the coarsest map.
    ZoomOut,
    /// Zoom-out and zoom-in, levels concatenated without gating.
    ZipNoMad,
    /// Zoom-out and zoom-in with attention gating.
    ZipMad,
    /// Plain down-sampling network with anchors split over the three maps.
    SplitAnchors,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::ZoomOut, Preset::ZipNoMad, Preset::ZipMad, Preset::SplitAnchors];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ZoomOut => "zoomout",
            Preset::ZipNoMad => "zip-noMAD",
            Preset::ZipMad => "zip-mad",
            Preset::SplitAnchors => "split-anchors",
        }
    }

    /// Overrides the architecture keys of `base`; training keys are left
    /// alone so every arm trains identically.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut rc = base.clone();
        let m = &mut rc.model;
        match self {
            Preset::ZoomOut => {
                m.topology = Topology::ZoomOut;
                m.attention = Attention::Uniform;
                m.anchors = AnchorSpec { strides: m.anchors.strides, ..AnchorSpec::all_on_top() };
            }
            Preset::SplitAnchors => {
                m.topology = Topology::ZoomOut;
                m.attention = Attention::Uniform;
            }
            Preset::ZipNoMad => {
                m.topology = Topology::ZoomOutIn;
                m.attention = Attention::Uniform;
            }
            Preset::ZipMad => {
                m.topology = Topology::ZoomOutIn;
                m.attention = Attention::Mad;
            }
        }
        rc
    }

    /// Baseline the presets modify: a narrow network that trains on one
    /// core in minutes.
    pub fn base_config() -> RunConfig {
        let mut rc = RunConfig::default();
        rc.model.stem_channels = 8;
        rc.model.level_channels = [16, 32, 64];
        rc.train.steps = 5000;
        rc.train.lr = 0.003;
        rc
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset `{s}`; expected one of zoomout, zip-noMAD, zip-mad, split-anchors"))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("zip".parse::<Preset>().is_err());
    }

    #[test]
    fn presets_only_touch_architecture() {
        let base = Preset::base_config();
        for p in Preset::ALL {
            let rc = p.apply(&base);
            assert_eq!(rc.train, base.train);
            rc.model.validate().unwrap();
        }
        let z = Preset::ZoomOut.apply(&base);
        assert!(z.model.anchors.scales[0].is_empty() && z.model.anchors.scales[1].is_empty());
        assert_eq!(z.model.anchors.scales[2].len(), 6);
    }
}
