//! Line-oriented architecture files.
//!
//! ```text
//! # comment
//! input 3                      # optional, defaults to 3 channels
//! block                        # starts the next resolution block
//! conv1 conv 3 2 1 8           # name kind kernel stride padding [out_channels]
//! pool1 pool 2 2 0
//! ```
//!
//! Layers before the first `block` line belong to block 1. Missing trailing blocks are empty.

use super::{ArchSpec, LayerKind, LayerSpec, NUM_BLOCKS};
use crate::error::{Error, Result};

pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut starts: Vec<usize> = Vec::new();
    let mut input_channels = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| Error::ArchParse { line, message };
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["block"] => {
                if starts.is_empty() && !layers.is_empty() {
                    starts.push(0);
                }
                starts.push(layers.len());
                if starts.len() > NUM_BLOCKS {
                    return Err(err(format!("more than {NUM_BLOCKS} blocks")));
                }
            }
            ["input", n] => {
                if input_channels.is_some() {
                    return Err(err("duplicate input directive".into()));
                }
                if !layers.is_empty() {
                    return Err(err("input directive must precede the layers".into()));
                }
                input_channels = Some(parse_num(n, "input channels").map_err(err)?);
            }
            [name, kind, kernel, stride, padding, rest @ ..] if rest.len() <= 1 => {
                let kind = match *kind {
                    "conv" => LayerKind::Conv,
                    "pool" => LayerKind::Pool,
                    other => return Err(err(format!("unknown layer kind `{other}`"))),
                };
                let out_channels = match rest.first() {
                    Some(v) => Some(parse_num(v, "out_channels").map_err(err)?),
                    None => None,
                };
                layers.push(LayerSpec {
                    name: (*name).to_string(),
                    kind,
                    kernel: parse_num(kernel, "kernel").map_err(err)?,
                    stride: parse_num(stride, "stride").map_err(err)?,
                    padding: parse_num(padding, "padding").map_err(err)?,
                    out_channels,
                });
            }
            _ => {
                return Err(err(format!(
                    "expected `name kind kernel stride padding [out_channels]`, got `{}`",
                    content.trim()
                )))
            }
        }
    }

    if starts.is_empty() {
        starts.push(0);
    }
    let mut block_starts = [layers.len(); NUM_BLOCKS];
    block_starts[..starts.len()].copy_from_slice(&starts);
    ArchSpec::new(layers, block_starts, input_channels.unwrap_or(3))
}

fn parse_num(token: &str, what: &str) -> std::result::Result<usize, String> {
    token
        .parse::<usize>()
        .map_err(|_| format!("{what} `{token}` is not a non-negative integer"))
}
