//! Compiled network layout: layer geometry and parameter slots, no values.
//!
//! Both the inference path ([`super::Model`]) and the training graph walk the
//! same `Plan`, so they cannot disagree about structure.

use super::arch::{ArchSpec, Family};
use crate::error::Result;
use crate::tensor::{ConvGeometry, Padding};

/// Shape of one parameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSpec {
    /// Real-valued conv kernel `[o, k, k, c]`.
    RealConv { shape: [usize; 4] },
    /// Binary conv kernel `[o, k, k, c]`.
    BinaryConv { shape: [usize; 4] },
    /// Batch-norm over `channels`.
    Norm { channels: usize },
    /// Binary dense weights `[units, features]`.
    BinaryDense { units: usize, features: usize },
    /// Per-unit real scale and bias.
    Affine { units: usize },
}

impl ParamSpec {
    /// Trainable scalar count (running statistics excluded).
    pub fn trainable(&self) -> usize {
        match *self {
            ParamSpec::RealConv { shape } | ParamSpec::BinaryConv { shape } => {
                shape.iter().product()
            }
            ParamSpec::Norm { channels } => 2 * channels,
            ParamSpec::BinaryDense { units, features } => units * features,
            ParamSpec::Affine { units } => 2 * units,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, ParamSpec::BinaryConv { .. } | ParamSpec::BinaryDense { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvRef {
    pub param: usize,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormRef {
    pub param: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
}

/// Downsampling shortcut: 2×2 pool, 1×1 real conv, batch-norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortcut {
    pub pool: Pool,
    pub conv: ConvRef,
    pub norm: NormRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    /// `shortcut(x) + BN(bconv(sign x))`; identity shortcut when `None`.
    Residual {
        conv: ConvRef,
        norm: NormRef,
        shortcut: Option<Shortcut>,
    },
    /// `concat(x, BN(bconv(sign x)))`.
    Dense { conv: ConvRef, norm: NormRef },
    /// `x` with `BN(bconv(sign x))` added into its last `growth` channels.
    Improve { conv: ConvRef, norm: NormRef },
    /// `BN(conv1x1(maxpool2(x)))` with a real 1×1 conv.
    Transition { conv: ConvRef, norm: NormRef },
}

/// Real 3×3 stride-2 conv, batch-norm, then 2×2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stem {
    pub conv: ConvRef,
    pub norm: NormRef,
}

/// Exit head: global average pool, batch-norm, sign, binary dense, affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadRef {
    pub norm: NormRef,
    pub dense: usize,
    pub affine: usize,
    pub features: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub stem: Stem,
    pub blocks: Vec<Vec<Unit>>,
    pub heads: Vec<HeadRef>,
    /// 1-based block index after which each exit sits.
    pub exit_blocks: Vec<usize>,
    pub params: Vec<ParamSpec>,
    pub names: Vec<String>,
}

/// Per-block compute for one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTrace {
    pub stem_macs: u64,
    pub block_macs: Vec<u64>,
    pub head_macs: Vec<u64>,
    /// `(h, w, c)` after each block.
    pub block_shapes: Vec<(usize, usize, usize)>,
}

impl CostTrace {
    /// MACs to reach and evaluate exit `i` (0-based): stem, every block up to
    /// its placement, and heads `0..=i`.
    pub fn exit_costs(&self, exit_blocks: &[usize]) -> Vec<u64> {
        let mut out = Vec::with_capacity(exit_blocks.len());
        for (i, &b) in exit_blocks.iter().enumerate() {
            let trunk: u64 = self.stem_macs + self.block_macs[..b].iter().sum::<u64>();
            let heads: u64 = self.head_macs[..=i].iter().sum();
            out.push(trunk + heads);
        }
        out
    }
}

struct Builder {
    params: Vec<ParamSpec>,
    names: Vec<String>,
}

impl Builder {
    fn slot(&mut self, spec: ParamSpec, name: String) -> usize {
        self.params.push(spec);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: String,
        binary: bool,
        k: usize,
        stride: usize,
        cin: usize,
        cout: usize,
    ) -> Result<ConvRef> {
        let geom = ConvGeometry::new(k, stride, Padding::Same, cin, cout)?;
        let shape = [cout, k, k, cin];
        let spec = if binary {
            ParamSpec::BinaryConv { shape }
        } else {
            ParamSpec::RealConv { shape }
        };
        Ok(ConvRef {
            param: self.slot(spec, name),
            geom,
        })
    }

    fn norm(&mut self, name: String, channels: usize) -> NormRef {
        NormRef {
            param: self.slot(ParamSpec::Norm { channels }, name),
            channels,
        }
    }
}

impl Plan {
    /// Full plan including exit heads. The spec must be valid.
    pub fn compile(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut plan = Self::compile_trunk(spec)?;
        let widths = plan.block_channels();
        let mut b = Builder {
            params: std::mem::take(&mut plan.params),
            names: std::mem::take(&mut plan.names),
        };
        for (i, &blk) in spec.exit_placements.iter().enumerate() {
            let features = widths[blk - 1];
            let norm = b.norm(format!("exit{}.norm", i + 1), features);
            let dense = b.slot(
                ParamSpec::BinaryDense {
                    units: spec.n_classes,
                    features,
                },
                format!("exit{}.dense", i + 1),
            );
            let affine = b.slot(
                ParamSpec::Affine {
                    units: spec.n_classes,
                },
                format!("exit{}.affine", i + 1),
            );
            plan.heads.push(HeadRef {
                norm,
                dense,
                affine,
                features,
                classes: spec.n_classes,
            });
        }
        plan.exit_blocks = spec.exit_placements.clone();
        plan.params = b.params;
        plan.names = b.names;
        Ok(plan)
    }

    /// Stem and blocks only; used to size exit placements.
    pub(crate) fn compile_trunk(spec: &ArchSpec) -> Result<Self> {
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
        };
        let w0 = spec.stage_widths[0];
        let stem = Stem {
            conv: b.conv("stem.conv".into(), false, 3, 2, 1, w0)?,
            norm: b.norm("stem.norm".into(), w0),
        };
        let growth = spec.growth();
        let mut blocks = Vec::new();
        let mut ch = w0;
        for (s, (&width, &count)) in spec.stage_widths.iter().zip(&spec.stage_blocks).enumerate() {
            for j in 0..count {
                let id = blocks.len() + 1;
                let down = s > 0 && j == 0;
                let mut units = Vec::new();
                match spec.family {
                    Family::QuickNet | Family::BiRealNet => {
                        let per_block = if spec.family == Family::QuickNet { 1 } else { 2 };
                        for u in 0..per_block {
                            let first = down && u == 0;
                            let tag = format!("block{id}.unit{u}");
                            let shortcut = if first {
                                let pool = if spec.family == Family::QuickNet {
                                    Pool::Max
                                } else {
                                    Pool::Avg
                                };
                                Some(Shortcut {
                                    pool,
                                    conv: b.conv(format!("{tag}.shortcut.conv"), false, 1, 1, ch, width)?,
                                    norm: b.norm(format!("{tag}.shortcut.norm"), width),
                                })
                            } else {
                                None
                            };
                            let stride = if first { 2 } else { 1 };
                            let conv = b.conv(format!("{tag}.conv"), true, 3, stride, ch, width)?;
                            let norm = b.norm(format!("{tag}.norm"), width);
                            units.push(Unit::Residual {
                                conv,
                                norm,
                                shortcut,
                            });
                            ch = width;
                        }
                    }
                    Family::BinaryDenseNet | Family::MeliusNet => {
                        if down {
                            let tag = format!("block{id}.transition");
                            let conv = b.conv(format!("{tag}.conv"), false, 1, 1, ch, width)?;
                            let norm = b.norm(format!("{tag}.norm"), width);
                            units.push(Unit::Transition { conv, norm });
                            ch = width;
                        }
                        let tag = format!("block{id}.dense");
                        let conv = b.conv(format!("{tag}.conv"), true, 3, 1, ch, growth)?;
                        let norm = b.norm(format!("{tag}.norm"), growth);
                        units.push(Unit::Dense { conv, norm });
                        ch += growth;
                        if spec.family == Family::MeliusNet {
                            let tag = format!("block{id}.improve");
                            let conv = b.conv(format!("{tag}.conv"), true, 3, 1, ch, growth)?;
                            let norm = b.norm(format!("{tag}.norm"), growth);
                            units.push(Unit::Improve { conv, norm });
                        }
                    }
                }
                blocks.push(units);
            }
        }
        Ok(Self {
            stem,
            blocks,
            heads: Vec::new(),
            exit_blocks: Vec::new(),
            params: b.params,
            names: b.names,
        })
    }

    /// Channel count after each block.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut ch = self.stem.conv.geom.out_channels;
        self.blocks
            .iter()
            .map(|units| {
                for u in units {
                    ch = unit_out_channels(u, ch);
                }
                ch
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::trainable).sum()
    }

    /// Walk the plan for an `h × w` single-channel input.
    pub fn trace(&self, h: usize, w: usize) -> Result<CostTrace> {
        let g = &self.stem.conv.geom;
        let stem_macs = g.macs(h, w)?;
        let (sh, sw) = g.output_dims(h, w)?;
        let (mut h, mut w) = (sh.div_ceil(2), sw.div_ceil(2));
        let mut c = g.out_channels;
        let mut block_macs = Vec::with_capacity(self.blocks.len());
        let mut block_shapes = Vec::with_capacity(self.blocks.len());
        for units in &self.blocks {
            let mut macs = 0;
            for u in units {
                match u {
                    Unit::Residual { conv, shortcut, .. } => {
                        if let Some(sc) = shortcut {
                            let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
                            macs += sc.conv.geom.macs(ph, pw)?;
                        }
                        macs += conv.geom.macs(h, w)?;
                        (h, w) = conv.geom.output_dims(h, w)?;
                    }
                    Unit::Dense { conv, .. } | Unit::Improve { conv, .. } => {
                        macs += conv.geom.macs(h, w)?;
                    }
                    Unit::Transition { conv, .. } => {
                        (h, w) = (h.div_ceil(2), w.div_ceil(2));
                        macs += conv.geom.macs(h, w)?;
                    }
                }
                c = unit_out_channels(u, c);
            }
            block_macs.push(macs);
            block_shapes.push((h, w, c));
        }
        let head_macs = self
            .heads
            .iter()
            .map(|hd| (hd.features * hd.classes) as u64)
            .collect();
        Ok(CostTrace {
            stem_macs,
            block_macs,
            head_macs,
            block_shapes,
        })
    }
}

pub(crate) fn unit_out_channels(u: &Unit, ch: usize) -> usize {
    match u {
        Unit::Residual { conv, .. } | Unit::Transition { conv, .. } => conv.geom.out_channels,
        Unit::Dense { conv, .. } => ch + conv.geom.out_channels,
        Unit::Improve { .. } => ch,
    }
}
