use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Super-resolution by an integer factor in `{2, 3, 4}`.
    Sr { scale: usize },
    /// Packed RGGB mosaic to RGB at twice the packed resolution.
    Isp,
    /// Low-light enhancement, same resolution.
    Lle,
}

impl Task {
    pub fn sr(scale: usize) -> Result<Self> {
        if !(2..=4).contains(&scale) {
            return config_err(format!("super-resolution scale must be 2, 3 or 4, got {scale}"));
        }
        Ok(Task::Sr { scale })
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sr { .. } => "sr",
            Task::Isp => "isp",
            Task::Lle => "lle",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Task::Sr { .. } => 0,
            Task::Isp => 1,
            Task::Lle => 2,
        }
    }

    pub fn scale(self) -> usize {
        match self {
            Task::Sr { scale } => scale,
            Task::Isp | Task::Lle => 1,
        }
    }

    /// Channels of the raw network input.
    pub fn input_channels(self) -> usize {
        match self {
            Task::Isp => 1,
            Task::Sr { .. } | Task::Lle => 3,
        }
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn output_size(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Task::Sr { scale } => (h * scale, w * scale),
            Task::Isp | Task::Lle => (h, w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Qcu,
    Add,
    Mul,
    CatConv,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Qcu, FusionKind::Add, FusionKind::Mul, FusionKind::CatConv];

    pub fn tag(self) -> u8 {
        match self {
            FusionKind::Qcu => 0,
            FusionKind::Add => 1,
            FusionKind::Mul => 2,
            FusionKind::CatConv => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Qcu => "qcu",
            FusionKind::Add => "add",
            FusionKind::Mul => "mul",
            FusionKind::CatConv => "cat_conv",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qcu" => Ok(FusionKind::Qcu),
            "add" => Ok(FusionKind::Add),
            "mul" => Ok(FusionKind::Mul),
            "cat_conv" | "cat+conv" | "catconv" => Ok(FusionKind::CatConv),
            other => Err(Error::Config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

/// Kernel of one training branch, relative to the block it is placed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MenuKernel {
    /// The block's nominal size.
    Nominal,
    /// A fixed odd size, clamped to the block's nominal size.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MenuEntry {
    pub kernel: MenuKernel,
    pub bn: bool,
}

impl MenuEntry {
    pub fn resolve(self, nominal: usize) -> (usize, bool) {
        let k = match self.kernel {
            MenuKernel::Nominal => nominal,
            MenuKernel::Fixed(k) => k.min(nominal),
        };
        (k, self.bn)
    }
}

impl fmt::Display for MenuEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kernel {
            MenuKernel::Nominal => f.write_str("K")?,
            MenuKernel::Fixed(k) => write!(f, "{k}")?,
        }
        if self.bn {
            f.write_str("+bn")?;
        }
        Ok(())
    }
}

impl FromStr for MenuEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (k, bn) = match s.strip_suffix("+bn") {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        let kernel = if k.eq_ignore_ascii_case("k") {
            MenuKernel::Nominal
        } else {
            match k.parse::<usize>() {
                Ok(v) if v % 2 == 1 => MenuKernel::Fixed(v),
                _ => return config_err(format!("branch kernel {k:?} must be K or an odd integer")),
            }
        };
        Ok(MenuEntry { kernel, bn })
    }
}

/// Formats a menu as `K,K+bn,3+bn,1`.
pub fn format_menu(menu: &[MenuEntry]) -> String {
    menu.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_menu(s: &str) -> Result<Vec<MenuEntry>> {
    let menu = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
    if menu.is_empty() {
        return config_err("branch menu is empty");
    }
    Ok(menu)
}

/// Architecture of a [`super::SyeNetModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyeNetConfig {
    pub task: Task,
    /// Feature channels between head and tail.
    pub width: usize,
    pub fusion: FusionKind,
    /// Branches of every ConvRep block.
    pub branch_menu: Vec<MenuEntry>,
    /// Channel expansion ratio `R` inside each branch.
    pub expansion: usize,
    pub ca_reduction: usize,
    /// PReLU after the head convolution.
    pub prelu: bool,
    pub precision: DType,
}

impl SyeNetConfig {
    pub fn default_menu() -> Vec<MenuEntry> {
        vec![
            MenuEntry { kernel: MenuKernel::Nominal, bn: false },
            MenuEntry { kernel: MenuKernel::Nominal, bn: true },
            MenuEntry { kernel: MenuKernel::Fixed(3), bn: true },
            MenuEntry { kernel: MenuKernel::Fixed(1), bn: false },
        ]
    }

    pub fn new(task: Task) -> Self {
        SyeNetConfig {
            task,
            width: 8,
            fusion: FusionKind::Qcu,
            branch_menu: Self::default_menu(),
            expansion: 2,
            ca_reduction: 2,
            prelu: false,
            precision: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Task::Sr { scale } = self.task {
            Task::sr(scale)?;
        }
        if self.width == 0 {
            return config_err("width must be positive");
        }
        if self.expansion == 0 {
            return config_err("expansion must be positive");
        }
        if self.branch_menu.is_empty() {
            return config_err("branch menu is empty");
        }
        if self.ca_reduction == 0 || !self.width.is_multiple_of(self.ca_reduction) {
            return config_err(format!(
                "width {} must be divisible by channel-attention reduction {}",
                self.width, self.ca_reduction
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn menu_roundtrip_and_clamp() {
        let menu = parse_menu("K,K+bn,3+bn,1").unwrap();
        assert_eq!(menu, SyeNetConfig::default_menu());
        assert_eq!(format_menu(&menu), "K,K+bn,3+bn,1");
        assert_eq!(menu[2].resolve(1), (1, true));
        assert_eq!(menu[0].resolve(5), (5, false));
        assert!(parse_menu("2").is_err());
        assert!(parse_menu("K,x").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SyeNetConfig::new(Task::Lle).validate().is_ok());
        let mut c = SyeNetConfig::new(Task::Isp);
        c.width = 7;
        assert!(c.validate().is_err());
        assert!(Task::sr(5).is_err());
        assert_eq!("CAT+CONV".parse::<FusionKind>().unwrap(), FusionKind::CatConv);
    }
}
