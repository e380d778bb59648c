//! Model geometry shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{make_layout, ClusterLayout, OrderKind};
use crate::scan::{Discretization, MixerConfig, ScanOptions, ScanPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// One forward scan per block (causal).
    #[default]
    Uni1scan,
    /// Four directional scans per block, averaged.
    Cross4scan,
}

impl ScanMode {
    pub fn scans(self) -> usize {
        match self {
            ScanMode::Uni1scan => 1,
            ScanMode::Cross4scan => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    NormedPixel,
    RawPixel,
    Dvae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormUnit {
    #[default]
    Cluster,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_k: usize,
    pub patch_size: usize,
    pub cluster_size: usize,
    pub image_size: [usize; 2],
    pub order: OrderKind,
    pub scan_mode: ScanMode,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub target_kind: TargetKind,
    pub norm_unit: NormUnit,
    pub num_classes: usize,
    pub discretization: Discretization,
    pub scan_path: ScanPath,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 768,
            depth: 12,
            state_dim: 16,
            expand: 1,
            conv_k: 4,
            patch_size: 16,
            cluster_size: 64,
            image_size: [192, 192],
            order: OrderKind::RowForward,
            scan_mode: ScanMode::Uni1scan,
            dec_depth: 4,
            dec_width: 512,
            target_kind: TargetKind::NormedPixel,
            norm_unit: NormUnit::Cluster,
            num_classes: 1000,
            discretization: Discretization::ZohExact,
            scan_path: ScanPath::default(),
        }
    }
}

impl ModelConfig {
    /// Base-size encoder at 224², patch 16.
    pub fn arm_b() -> Self {
        Self {
            image_size: [224, 224],
            cluster_size: 16,
            ..Self::default()
        }
    }

    pub fn arm_l() -> Self {
        Self {
            width: 1024,
            depth: 24,
            ..Self::arm_b()
        }
    }

    pub fn arm_h() -> Self {
        Self {
            width: 1536,
            depth: 24,
            ..Self::arm_b()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("width and depth must be >= 1".into()));
        }
        if self.state_dim == 0 || self.conv_k == 0 {
            return Err(Error::Config("state_dim and conv_k must be >= 1".into()));
        }
        if self.expand != 1 {
            return Err(Error::Config(format!("expand must be 1, got {}", self.expand)));
        }
        if self.dec_depth == 0 || self.dec_width == 0 {
            return Err(Error::Config("dec_depth and dec_width must be >= 1".into()));
        }
        if let ScanPath::Chunked { chunk: 0 } = self.scan_path {
            return Err(Error::Config("scan chunk must be >= 1".into()));
        }
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<ClusterLayout> {
        make_layout(
            self.image_size[0],
            self.image_size[1],
            self.patch_size,
            self.cluster_size,
            self.order,
        )
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch_size, self.image_size[1] / self.patch_size)
    }

    pub fn seq_len(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// SwiGLU hidden width: `8/3 · D` rounded to the nearest multiple of 8.
    pub fn ff_dim(width: usize) -> usize {
        let raw = 8.0 * width as f64 / 3.0;
        (((raw / 8.0).round() as usize) * 8).max(8)
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            discretization: self.discretization,
            path: self.scan_path,
            ..ScanOptions::default()
        }
    }

    pub fn mixer(&self, width: usize) -> MixerConfig {
        MixerConfig {
            conv_k: self.conv_k,
            scan: self.scan_options(),
            ..MixerConfig::new(width, self.state_dim)
        }
    }
}
