//! Net container: a plain-text architecture header followed by the parameter
//! tensors as concatenated UQT blobs (f32 storage), weights then bias per
//! parameterized layer in stack order.

use crate::error::{Error, Result};
use crate::io::uqt::{self, Dtype};
use crate::net::Layer;
use crate::ops::Padding;
use crate::quality::{QNetArch, QualityNet};
use crate::segmenter::SegNet;
use crate::tensor::Tensor;
use std::io::Cursor;
use std::path::Path;

const FORMAT_LINE: &str = "UQSEG-NET v1";
const END_LINE: &str = "end";

fn layer_token(layer: &Layer) -> String {
    match layer {
        Layer::Conv2d { weights, padding, .. } => {
            let pad = match padding {
                Padding::Same => "same",
                Padding::Valid => "valid",
            };
            format!("conv2d:{}:{}:{pad}", weights.shape()[0], weights.shape()[1])
        }
        Layer::Relu => "relu".into(),
        Layer::Dropout { .. } => "dropout".into(),
        Layer::MaxPool2x2 => "maxpool".into(),
        Layer::Upsample2xNearest => "upsample".into(),
        Layer::SoftmaxChannels => "softmax".into(),
        Layer::Flatten => "flatten".into(),
        Layer::Dense { weights, .. } => {
            format!("dense:{}:{}", weights.shape()[0], weights.shape()[1])
        }
    }
}

fn parse_layer_token(tok: &str, dropout_p: f64, path: &Path) -> Result<Layer> {
    let parts: Vec<&str> = tok.split(':').collect();
    let bad = || Error::format(path, format!("bad layer token '{tok}'"));
    match parts[0] {
        "conv2d" => {
            if parts.len() != 4 {
                return Err(bad());
            }
            let out: usize = parts[1].parse().map_err(|_| bad())?;
            let inp: usize = parts[2].parse().map_err(|_| bad())?;
            let padding = match parts[3] {
                "same" => Padding::Same,
                "valid" => Padding::Valid,
                _ => return Err(bad()),
            };
            Ok(Layer::Conv2d {
                weights: Tensor::zeros(&[out, inp, 3, 3]),
                bias: Tensor::zeros(&[out]),
                padding,
            })
        }
        "dense" => {
            if parts.len() != 3 {
                return Err(bad());
            }
            let out: usize = parts[1].parse().map_err(|_| bad())?;
            let inp: usize = parts[2].parse().map_err(|_| bad())?;
            Ok(Layer::Dense {
                weights: Tensor::zeros(&[out, inp]),
                bias: Tensor::zeros(&[out]),
            })
        }
        "relu" => Ok(Layer::Relu),
        "dropout" => Ok(Layer::Dropout { p: dropout_p }),
        "maxpool" => Ok(Layer::MaxPool2x2),
        "upsample" => Ok(Layer::Upsample2xNearest),
        "softmax" => Ok(Layer::SoftmaxChannels),
        "flatten" => Ok(Layer::Flatten),
        _ => Err(bad()),
    }
}

fn tokens_of(layers: &[Layer]) -> String {
    layers.iter().map(layer_token).collect::<Vec<_>>().join(" ")
}

fn append_params(blobs: &mut Vec<u8>, layers: &[Layer]) {
    for p in crate::net::stack_params(layers) {
        uqt::write_to(&mut *blobs, p, Dtype::F32).expect("in-memory write");
    }
}

fn fill_params(layers: &mut [Layer], cursor: &mut Cursor<&[u8]>, path: &Path) -> Result<()> {
    for slot in crate::net::stack_params_mut(layers) {
        let (tensor, _) = uqt::read_from(cursor, path)?;
        if tensor.shape() != slot.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter blob shape {:?} does not match layer shape {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = tensor;
    }
    Ok(())
}

/// Split the file into header lines and the parameter blob region.
fn split_file(bytes: &[u8], path: &Path) -> Result<(Vec<(String, String)>, usize)> {
    let mut pairs = Vec::new();
    let mut offset = 0usize;
    let mut first = true;
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "header not terminated by 'end'"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format(path, "header is not utf-8"))?;
        offset += nl + 1;
        if first {
            if line != FORMAT_LINE {
                return Err(Error::format(path, format!("bad format line '{line}'")));
            }
            first = false;
            continue;
        }
        if line == END_LINE {
            return Ok((pairs, offset));
        }
        match line.split_once(' ') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => return Err(Error::format(path, format!("bad header line '{line}'"))),
        }
    }
}

fn header_get<'a>(pairs: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(path, format!("missing header key '{key}'")))
}

pub fn save_segnet(path: &Path, net: &SegNet) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FORMAT_LINE.as_bytes());
    out.push(b'\n');
    let header = [
        ("kind", "seg".to_string()),
        ("side", net.side.to_string()),
        ("dropout", net.dropout_p.to_string()),
        ("layers", tokens_of(&net.layers)),
    ];
    for (k, v) in header {
        out.extend_from_slice(format!("{k} {v}\n").as_bytes());
    }
    out.extend_from_slice(END_LINE.as_bytes());
    out.push(b'\n');
    append_params(&mut out, &net.layers);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_segnet(path: &Path) -> Result<SegNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pairs, blob_start) = split_file(&bytes, path)?;
    if header_get(&pairs, "kind", path)? != "seg" {
        return Err(Error::format(path, "not a segmenter net file"));
    }
    let side: usize = header_get(&pairs, "side", path)?
        .parse()
        .map_err(|_| Error::format(path, "bad side"))?;
    let dropout_p: f64 = header_get(&pairs, "dropout", path)?
        .parse()
        .map_err(|_| Error::format(path, "bad dropout"))?;
    let mut layers = Vec::new();
    for tok in header_get(&pairs, "layers", path)?.split_whitespace() {
        layers.push(parse_layer_token(tok, dropout_p, path)?);
    }
    let mut cursor = Cursor::new(&bytes[blob_start..]);
    fill_params(&mut layers, &mut cursor, path)?;
    Ok(SegNet {
        layers,
        dropout_p,
        side,
    })
}

/// `extra` carries pipeline provenance (uncertainty model/estimate settings)
/// so evaluation commands can re-create the net's inputs; it round-trips
/// untouched.
pub fn save_quality_net(path: &Path, qnet: &QualityNet, extra: &[(String, String)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FORMAT_LINE.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("kind quality\n").as_bytes());
    out.extend_from_slice(format!("side {}\n", qnet.side).as_bytes());
    out.extend_from_slice(format!("arch {}\n", qnet.arch.as_str()).as_bytes());
    for branch in &qnet.branches {
        out.extend_from_slice(format!("branch {}\n", tokens_of(branch)).as_bytes());
    }
    out.extend_from_slice(format!("head {}\n", tokens_of(&qnet.head)).as_bytes());
    for (k, v) in extra {
        out.extend_from_slice(format!("x-{k} {v}\n").as_bytes());
    }
    out.extend_from_slice(END_LINE.as_bytes());
    out.push(b'\n');
    for branch in &qnet.branches {
        append_params(&mut out, branch);
    }
    append_params(&mut out, &qnet.head);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_quality_net(path: &Path) -> Result<(QualityNet, Vec<(String, String)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pairs, blob_start) = split_file(&bytes, path)?;
    if header_get(&pairs, "kind", path)? != "quality" {
        return Err(Error::format(path, "not a quality net file"));
    }
    let side: usize = header_get(&pairs, "side", path)?
        .parse()
        .map_err(|_| Error::format(path, "bad side"))?;
    let arch = QNetArch::parse(header_get(&pairs, "arch", path)?)?;
    let mut branches = Vec::new();
    let mut head = Vec::new();
    let mut extra = Vec::new();
    for (k, v) in &pairs {
        match k.as_str() {
            "branch" => {
                let mut layers = Vec::new();
                for tok in v.split_whitespace() {
                    layers.push(parse_layer_token(tok, 0.0, path)?);
                }
                branches.push(layers);
            }
            "head" => {
                for tok in v.split_whitespace() {
                    head.push(parse_layer_token(tok, 0.0, path)?);
                }
            }
            _ => {
                if let Some(name) = k.strip_prefix("x-") {
                    extra.push((name.to_string(), v.clone()));
                }
            }
        }
    }
    if branches.len() != arch.branch_count() {
        return Err(Error::format(
            path,
            format!(
                "architecture {} expects {} branches, file has {}",
                arch.as_str(),
                arch.branch_count(),
                branches.len()
            ),
        ));
    }
    if head.is_empty() {
        return Err(Error::format(path, "missing head"));
    }
    let mut cursor = Cursor::new(&bytes[blob_start..]);
    for branch in &mut branches {
        fill_params(branch, &mut cursor, path)?;
    }
    fill_params(&mut head, &mut cursor, path)?;
    Ok((
        QualityNet {
            arch,
            branches,
            head,
            side,
        },
        extra,
    ))
}
