use super::{parse_arch, ArchSpec};
use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("tinyfcn", include_str!("../../../../presets/tinyfcn.arch")),
    ("alexnet", include_str!("../../../../presets/alexnet.arch")),
    ("vgg16", include_str!("../../../../presets/vgg16.arch")),
    ("resnet101", include_str!("../../../../presets/resnet101.arch")),
    ("mobilenetv2", include_str!("../../../../presets/mobilenetv2.arch")),
];

pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
    pub arch: ArchSpec,
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<Preset> {
    let (name, text) = PRESETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            Error::InvalidArchitecture(format!(
                "unknown preset `{name}` (known: {})",
                preset_names().collect::<Vec<_>>().join(", ")
            ))
        })?;
    Ok(Preset { name, text, arch: parse_arch(text)? })
}
