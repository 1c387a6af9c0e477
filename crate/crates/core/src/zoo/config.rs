use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};

pub const ULTRASEG_CHANNELS: [usize; 5] = [8, 16, 48, 64, 96];

/// The named UNet ladder, widest first.
pub const UNET_LADDER: [(&str, [usize; 5]); 5] = [
    ("unet-base", [64, 128, 256, 512, 1024]),
    ("unet-medium", [32, 64, 128, 256, 512]),
    ("unet-light", [24, 48, 96, 192, 384]),
    ("unet-small", [16, 32, 64, 128, 256]),
    ("unet-tiny", [8, 16, 32, 64, 128]),
];

pub const VARIANTS: [&str; 7] =
    ["ultraseg-108k", "ultraseg-130k", "unet-base", "unet-medium", "unet-light", "unet-small", "unet-tiny"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Family {
    UltraSeg,
    UNet,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::UltraSeg => "ultraseg",
            Family::UNet => "unet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub family: Family,
    pub name: String,
    pub in_channels: usize,
    /// Encoder widths, shallowest first.
    pub channels: Vec<usize>,
    /// Cascaded EDBs at encoder stage 3 (UltraSeg only).
    pub edb_blocks: usize,
    pub edb_expansion: usize,
    pub use_agf_ssa: bool,
    /// Hidden width of the AGF trunk.
    pub agf_mid: usize,
    pub gsa_groups: usize,
    pub input: (usize, usize),
    /// Output strides of the intermediate region heads, shallowest first.
    pub region_levels: Vec<usize>,
    /// Output strides of the boundary heads, shallowest first.
    pub boundary_levels: Vec<usize>,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ultraseg-108k" | "ultraseg-130k" => Ok(ModelConfig {
                family: Family::UltraSeg,
                name: name.to_string(),
                in_channels: 3,
                channels: ULTRASEG_CHANNELS.to_vec(),
                edb_blocks: 2,
                edb_expansion: 1,
                use_agf_ssa: name == "ultraseg-130k",
                agf_mid: 12,
                gsa_groups: 4,
                input: (256, 256),
                region_levels: vec![2, 4, 8, 16],
                boundary_levels: vec![4, 8, 16],
            }),
            _ => {
                let (_, ch) = UNET_LADDER
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Config(format!("unknown model variant `{name}`")))?;
                Ok(ModelConfig {
                    family: Family::UNet,
                    name: name.to_string(),
                    in_channels: 3,
                    channels: ch.to_vec(),
                    edb_blocks: 0,
                    edb_expansion: 1,
                    use_agf_ssa: false,
                    agf_mid: 0,
                    gsa_groups: 0,
                    input: (256, 256),
                    region_levels: Vec::new(),
                    boundary_levels: Vec::new(),
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() != 5 {
            return bad(format!("expected 5 encoder widths, got {}", self.channels.len()));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        let (h, w) = self.input;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad(format!("input {h}x{w} must be a positive multiple of 16"));
        }
        match self.family {
            Family::UltraSeg => {
                if self.channels != ULTRASEG_CHANNELS {
                    return bad(format!("ultraseg widths must be {ULTRASEG_CHANNELS:?}"));
                }
                if self.use_agf_ssa != (self.name == "ultraseg-130k") {
                    return bad("use_agf_ssa is set exactly for ultraseg-130k".into());
                }
                if !self.channels[2].is_multiple_of(3) || self.edb_expansion == 0 {
                    return bad("EDB needs stage-3 width divisible by 3 and expansion >= 1".into());
                }
                if self.gsa_groups == 0 || !self.channels[4].is_multiple_of(self.gsa_groups) {
                    return bad(format!("GSA groups {} must divide {}", self.gsa_groups, self.channels[4]));
                }
                if self.use_agf_ssa && self.agf_mid == 0 {
                    return bad("agf_mid must be positive".into());
                }
                if self.region_levels != [2, 4, 8, 16] || self.boundary_levels != [4, 8, 16] {
                    return bad("ultraseg supervises region at strides 2,4,8,16 and boundary at 4,8,16".into());
                }
            }
            Family::UNet => {
                if !UNET_LADDER.iter().any(|(_, c)| self.channels == c) {
                    return bad(format!("{:?} is not one of the UNet ladder widths", self.channels));
                }
                if self.edb_blocks != 0 || self.use_agf_ssa {
                    return bad("unet takes no EDB/AGF options".into());
                }
                if !self.region_levels.is_empty() || !self.boundary_levels.is_empty() {
                    return bad("unet has no auxiliary heads".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "family={}", self.family.as_str());
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "channels={}", list(&self.channels));
        let _ = writeln!(s, "edb_blocks={}", self.edb_blocks);
        let _ = writeln!(s, "edb_expansion={}", self.edb_expansion);
        let _ = writeln!(s, "use_agf_ssa={}", self.use_agf_ssa);
        let _ = writeln!(s, "agf_mid={}", self.agf_mid);
        let _ = writeln!(s, "gsa_groups={}", self.gsa_groups);
        let _ = writeln!(s, "input={}x{}", self.input.0, self.input.1);
        let _ = writeln!(s, "region_levels={}", list(&self.region_levels));
        let _ = writeln!(s, "boundary_levels={}", list(&self.boundary_levels));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: Vec<(&str, &str)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if fields.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
            fields.push((k, v));
        }
        let get = |k: &str| {
            fields.iter().find(|(key, _)| *key == k).map(|(_, v)| *v).ok_or_else(|| Error::Config(format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.parse().map_err(|_| Error::Config(format!("`{k}`: `{v}` is not a non-negative integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("`{k}`: bad list entry `{x}`"))))
                .collect()
        };
        let family = match get("family")? {
            "ultraseg" => Family::UltraSeg,
            "unet" => Family::UNet,
            f => return Err(Error::Config(format!("unknown family `{f}`"))),
        };
        let use_agf_ssa = match get("use_agf_ssa")? {
            "true" => true,
            "false" => false,
            v => return Err(Error::Config(format!("use_agf_ssa: `{v}` is not a boolean"))),
        };
        let input = {
            let v = get("input")?;
            let (h, w) = v.split_once('x').ok_or_else(|| Error::Config(format!("input: expected HxW, got `{v}`")))?;
            let p = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("input: bad size `{v}`")));
            (p(h)?, p(w)?)
        };
        const KEYS: [&str; 12] = [
            "family",
            "name",
            "in_channels",
            "channels",
            "edb_blocks",
            "edb_expansion",
            "use_agf_ssa",
            "agf_mid",
            "gsa_groups",
            "input",
            "region_levels",
            "boundary_levels",
        ];
        if let Some((k, _)) = fields.iter().find(|(k, _)| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let cfg = ModelConfig {
            family,
            name: get("name")?.to_string(),
            in_channels: num("in_channels")?,
            channels: list("channels")?,
            edb_blocks: num("edb_blocks")?,
            edb_expansion: num("edb_expansion")?,
            use_agf_ssa,
            agf_mid: num("agf_mid")?,
            gsa_groups: num("gsa_groups")?,
            input,
            region_levels: list("region_levels")?,
            boundary_levels: list("boundary_levels")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
