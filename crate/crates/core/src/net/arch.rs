use serde::{Deserialize, Serialize};

use super::plan::Plan;
use crate::error::{Error, Result};

/// Number of exits in every network, the final classifier included.
pub const NUM_EXITS: usize = 5;

/// Block family. All four share the same stem, stage layout and exit heads;
/// they differ in how a block combines its binary convolution with its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// One residual unit per block; max-pool + 1×1 real shortcut on downsampling.
    QuickNet,
    /// Two residual units per block (a real shortcut around every binary
    /// conv); avg-pool + 1×1 real shortcut on downsampling.
    BiRealNet,
    /// Each block concatenates `growth` new channels; stages start with a
    /// max-pool + 1×1 real transition.
    BinaryDenseNet,
    /// Dense block followed by an improvement block that adds a residual
    /// into the newest `growth` channels.
    MeliusNet,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::QuickNet,
        Family::BiRealNet,
        Family::BinaryDenseNet,
        Family::MeliusNet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::QuickNet => "quicknet",
            Family::BiRealNet => "birealnet",
            Family::BinaryDenseNet => "binarydensenet",
            Family::MeliusNet => "meliusnet",
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Family::BinaryDenseNet | Family::MeliusNet)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let norm = norm.strip_suffix("style").unwrap_or(&norm);
        Family::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| Error::Arch(format!("unknown family {s:?}")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative network description.
///
/// `exit_placements[i]` is the 1-based index of the block after which exit
/// `i + 1` sits; the last one is always the final block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    /// Channels added per dense block (dense families only). Defaults to half
    /// the first stage width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<usize>,
    pub n_classes: usize,
    pub exit_placements: Vec<usize>,
    pub input_frames: usize,
    pub input_bins: usize,
}

impl ArchSpec {
    /// Spec for 98×64 inputs with exits spread evenly by compute.
    pub fn new(
        family: Family,
        stage_widths: Vec<usize>,
        stage_blocks: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        Self::with_input(family, stage_widths, stage_blocks, n_classes, 98, 64)
    }

    pub fn with_input(
        family: Family,
        stage_widths: Vec<usize>,
        stage_blocks: Vec<usize>,
        n_classes: usize,
        input_frames: usize,
        input_bins: usize,
    ) -> Result<Self> {
        let mut spec = Self {
            family,
            stage_widths,
            stage_blocks,
            growth: None,
            n_classes,
            exit_placements: Vec::new(),
            input_frames,
            input_bins,
        };
        spec.exit_placements = spec.default_placements()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Widths `[32, 64, 128]`, two blocks per stage.
    pub fn toy(family: Family, n_classes: usize) -> Result<Self> {
        Self::new(family, vec![32, 64, 128], vec![2, 2, 2], n_classes)
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn growth(&self) -> usize {
        self.growth
            .unwrap_or_else(|| (self.stage_widths.first().copied().unwrap_or(2) / 2).max(1))
    }

    fn validate_layout(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Arch(m));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_blocks.len() {
            return bad(format!(
                "need one width per stage, got {} widths for {} stages",
                self.stage_widths.len(),
                self.stage_blocks.len()
            ));
        }
        if self.stage_widths.contains(&0) {
            return bad("stage widths must be positive".into());
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.growth == Some(0) {
            return bad("growth must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.input_frames == 0 || self.input_bins == 0 {
            return bad("input shape must be non-empty".into());
        }
        if self.total_blocks() < NUM_EXITS {
            return bad(format!(
                "{} blocks cannot host {NUM_EXITS} exits",
                self.total_blocks()
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_layout()?;
        let p = &self.exit_placements;
        if p.len() != NUM_EXITS {
            return Err(Error::Arch(format!(
                "exactly {NUM_EXITS} exit placements required, got {}",
                p.len()
            )));
        }
        if p[0] == 0 || p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Arch(format!(
                "exit placements must be strictly increasing block indices >= 1, got {p:?}"
            )));
        }
        if *p.last().unwrap() != self.total_blocks() {
            return Err(Error::Arch(format!(
                "last exit must follow the final block ({}), got {p:?}",
                self.total_blocks()
            )));
        }
        Ok(())
    }

    /// Exit placements spaced roughly evenly by cumulative trunk MACs at the
    /// nominal input size: exit `i` follows the first block whose cumulative
    /// cost reaches `i/5` of the total.
    pub fn default_placements(&self) -> Result<Vec<usize>> {
        self.validate_layout()?;
        let plan = Plan::compile_trunk(self)?;
        let trace = plan.trace(self.input_frames, self.input_bins)?;
        let blocks = self.total_blocks();
        let mut cum = Vec::with_capacity(blocks);
        let mut acc = trace.stem_macs;
        for m in &trace.block_macs {
            acc += m;
            cum.push(acc);
        }
        let total = *cum.last().unwrap() as f64;
        let mut out = Vec::with_capacity(NUM_EXITS);
        let mut prev = 0;
        for i in 1..NUM_EXITS {
            let target = total * i as f64 / NUM_EXITS as f64;
            let latest = blocks - (NUM_EXITS - i);
            let mut b = prev + 1;
            while b < latest && (cum[b - 1] as f64) < target {
                b += 1;
            }
            out.push(b);
            prev = b;
        }
        out.push(blocks);
        Ok(out)
    }

    /// Canonical text form embedded in model files.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}
