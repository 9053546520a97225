//! UNet++ nested encoder-decoder with optional LD + cross-attention at nested nodes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::CrossAttention;
use crate::error::{invalid, Result};
use crate::ld::{LdBlock, LdConfig, LdParams};
use crate::nn::{Builder, Conv2d, ConvBlock, ConvNormAct};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SitePreset {
    /// Every nested node `(i, j)` with `j >= 1`.
    All,
    /// Plain UNet++.
    None,
}

/// Nested nodes that receive an LDCA module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LdcaSites {
    Preset(SitePreset),
    List(Vec<[usize; 2]>),
}

impl Default for LdcaSites {
    fn default() -> Self {
        LdcaSites::Preset(SitePreset::All)
    }
}

impl LdcaSites {
    pub fn all() -> Self {
        LdcaSites::Preset(SitePreset::All)
    }

    pub fn none() -> Self {
        LdcaSites::Preset(SitePreset::None)
    }

    /// Concrete `(i, j)` set for a network of the given depth.
    pub fn resolve(&self, depth: usize) -> Result<BTreeSet<(usize, usize)>> {
        match self {
            LdcaSites::Preset(SitePreset::All) => {
                Ok((1..=depth).flat_map(|j| (0..=depth - j).map(move |i| (i, j))).collect())
            }
            LdcaSites::Preset(SitePreset::None) => Ok(BTreeSet::new()),
            LdcaSites::List(list) => list
                .iter()
                .map(|&[i, j]| {
                    if j == 0 || i + j > depth {
                        Err(invalid!("LDCA site ({i},{j}) is not a nested node of a depth-{depth} network"))
                    } else {
                        Ok((i, j))
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Number of downsamplings.
    pub depth: usize,
    /// Channels at level 0; doubled per level.
    pub base_width: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub ldca_sites: LdcaSites,
    pub ld: LdParams,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
            patch_size: 48,
            in_channels: 1,
            ldca_sites: LdcaSites::all(),
            ld: LdParams::default(),
        }
    }
}

impl BackboneConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(invalid!("backbone depth, base_width and in_channels must be positive"));
        }
        if self.depth > 16 {
            return Err(invalid!("backbone depth {} is unreasonably large", self.depth));
        }
        self.check_size(self.patch_size)?;
        self.ldca_sites.resolve(self.depth)?;
        LdConfig {
            in_channels: 1,
            out_channels: 1,
            params: self.ld,
        }
        .validate()
    }

    fn check_size(&self, size: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if size == 0 || size % f != 0 {
            return Err(invalid!(
                "spatial size {size} is not divisible by 2^depth = {f}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ldca {
    pub ld: LdBlock,
    pub ca: CrossAttention,
}

#[derive(Debug, Clone)]
pub struct NestedNode {
    pub i: usize,
    pub j: usize,
    /// Bilinear x2 of `X[i+1, j-1]` followed by this 3x3 conv-norm-ReLU.
    pub up: ConvNormAct,
    pub block: ConvBlock,
    pub ldca: Option<Ldca>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub encoders: Vec<ConvBlock>,
    /// Ordered column by column (`j` ascending, then `i`), i.e. evaluation order.
    pub nodes: Vec<NestedNode>,
    pub head: Conv2d,
}

impl Backbone {
    pub fn new<T: Scalar>(config: BackboneConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let sites = config.ldca_sites.resolve(config.depth)?;
        let b = &mut Builder::new(store, seed);
        let d = config.depth;
        let encoders = (0..=d)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { config.width(i - 1) };
                ConvBlock::new(b, &format!("enc{i}"), cin, config.width(i))
            })
            .collect();
        let mut nodes = Vec::new();
        for j in 1..=d {
            for i in 0..=d - j {
                let w = config.width(i);
                let cin = (j + 1) * w;
                let node = b.scope(&format!("node{i}_{j}"), |b| -> Result<NestedNode> {
                    let ldca = if sites.contains(&(i, j)) {
                        let ld = LdBlock::new(
                            b,
                            "ld",
                            LdConfig {
                                in_channels: cin,
                                out_channels: w,
                                params: config.ld,
                            },
                        )?;
                        Some(Ldca {
                            ld,
                            ca: CrossAttention::new(b, "ca", w, w, w),
                        })
                    } else {
                        None
                    };
                    Ok(NestedNode {
                        i,
                        j,
                        up: ConvNormAct::new(b, "up", config.width(i + 1), w, (3, 3)),
                        block: ConvBlock::new(b, "block", cin, w),
                        ldca,
                    })
                })?;
                nodes.push(node);
            }
        }
        let head = Conv2d::new(b, "head", config.width(0), 1, (1, 1), true);
        Ok(Self {
            config,
            encoders,
            nodes,
            head,
        })
    }

    pub fn ldca_sites(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().filter(|n| n.ldca.is_some()).map(|n| (n.i, n.j)).collect()
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(invalid!(
                "backbone expects [N, {}, H, W] input, got {s:?}",
                self.config.in_channels
            ));
        }
        self.config.check_size(s[2])?;
        self.config.check_size(s[3])
    }

    /// Pre-sigmoid logits `[N, 1, H, W]`.
    pub fn forward_logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.run(tape, store, x, None)?.0)
    }

    /// Foreground probabilities `[N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let logits = self.forward_logits(tape, store, x)?;
        Ok(tape.sigmoid(logits))
    }

    /// Logits plus the input of the LD block at `site` (for offset inspection).
    pub fn forward_capture<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        site: (usize, usize),
    ) -> Result<(Var, Option<Var>)> {
        self.run(tape, store, x, Some(site))
    }

    fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        capture: Option<(usize, usize)>,
    ) -> Result<(Var, Option<Var>)> {
        self.check_input(tape, x)?;
        let d = self.config.depth;
        // grid[i][j] = X[i, j]
        let mut grid: Vec<Vec<Var>> = vec![Vec::new(); d + 1];
        let mut h = x;
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h);
            }
            h = enc.forward(tape, store, h);
            grid[i].push(h);
        }
        let mut captured = None;
        for node in &self.nodes {
            let (i, j) = (node.i, node.j);
            let deeper = grid[i + 1][j - 1];
            let (oh, ow) = {
                let s = tape.value(grid[i][0]).shape();
                (s[2], s[3])
            };
            let up = tape.resize_bilinear(deeper, oh, ow);
            let up = node.up.forward(tape, store, up);
            let mut parts = grid[i][..j].to_vec();
            parts.push(up);
            let cat = tape.concat_channels(&parts);
            let x_s = node.block.forward(tape, store, cat);
            let out = match &node.ldca {
                Some(m) => {
                    if capture == Some((i, j)) {
                        captured = Some(cat);
                    }
                    let x_d = m.ld.forward(tape, store, cat)?;
                    let agg = m.ca.forward(tape, store, x_d, x_s)?;
                    tape.add(agg, x_s)
                }
                None => x_s,
            };
            grid[i].push(out);
        }
        let logits = self.head.forward(tape, store, grid[0][d]);
        Ok((logits, captured))
    }
}
