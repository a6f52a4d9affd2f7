//! Model file format.
//!
//! A human-readable header describes the task and every layer in order,
//! including each layer's byte offset and length inside the weight blob that
//! follows. The blob is raw little-endian f32, layer by layer, kernel first
//! (channel-major) then bias.
//!
//! ```text
//! AJPQ-MODEL v1
//! task classification
//! layers 2
//! layer 0 kind conv in 3 out 8 k 3 stride 1 w 12 h 12 bias 1 offset 0 len 896
//! layer 1 kind fc in 8 out 10 k 1 stride 0 w 1 h 1 bias 1 offset 896 len 360
//! end
//! <blob>
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Layer, LayerKind, LayerSpec, NetworkIR, Task};
use crate::error::{Error, Result};

const MAGIC: &str = "AJPQ-MODEL v1";

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv => "conv",
        LayerKind::DepthwiseConv => "dwconv",
        LayerKind::FullyConnected => "fc",
    }
}

fn kind_from(name: &str) -> Result<LayerKind> {
    match name {
        "conv" => Ok(LayerKind::Conv),
        "dwconv" => Ok(LayerKind::DepthwiseConv),
        "fc" => Ok(LayerKind::FullyConnected),
        other => Err(Error::Format(format!("unknown layer kind '{other}'"))),
    }
}

fn layer_blob_len(spec: &LayerSpec) -> usize {
    let biases = if spec.has_bias { spec.out_channels } else { 0 };
    4 * (spec.weight_count() + biases)
}

/// Writes a network to `path`.
pub fn write_model(net: &NetworkIR, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{MAGIC}")?;
    let task = match net.task() {
        Task::Classification => "classification",
        Task::Detection => "detection",
    };
    writeln!(out, "task {task}")?;
    writeln!(out, "layers {}", net.len())?;
    let mut offset = 0usize;
    for layer in net.layers() {
        let s = &layer.spec;
        let len = layer_blob_len(s);
        writeln!(
            out,
            "layer {} kind {} in {} out {} k {} stride {} w {} h {} bias {} offset {} len {}",
            s.index,
            kind_name(s.kind),
            s.in_channels,
            s.out_channels,
            s.kernel_size,
            s.stride,
            s.input_width,
            s.input_height,
            u8::from(s.has_bias),
            offset,
            len
        )?;
        offset += len;
    }
    writeln!(out, "end")?;
    for layer in net.layers() {
        for v in layer.kernel.iter().chain(layer.bias.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct FieldReader<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
    line: &'a str,
}

impl<'a> FieldReader<'a> {
    fn new(line: &'a str) -> Self {
        Self { tokens: line.split_whitespace().collect(), pos: 0, line }
    }

    fn expect(&mut self, key: &str) -> Result<&'a str> {
        let k = self.next_token()?;
        if k != key {
            return Err(Error::Format(format!(
                "expected '{key}' in '{}', found '{k}'",
                self.line
            )));
        }
        self.next_token()
    }

    fn expect_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.expect(key)?;
        v.parse().map_err(|_| Error::Format(format!("bad number '{v}' for '{key}'")))
    }

    fn next_token(&mut self) -> Result<&'a str> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| Error::Format(format!("truncated line '{}'", self.line)))?;
        self.pos += 1;
        Ok(t)
    }
}

/// Reads a network from `path`.
pub fn read_model(path: &Path) -> Result<NetworkIR> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    parse_model(&raw)
}

fn parse_model(raw: &[u8]) -> Result<NetworkIR> {
    // Header is ASCII up to the line "end"; everything after is the blob.
    let needle = b"\nend\n";
    let end = raw
        .windows(needle.len())
        .position(|w| w == needle)
        .ok_or_else(|| Error::Format("missing 'end' header terminator".into()))?;
    let header = std::str::from_utf8(&raw[..end])
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let blob = &raw[end + needle.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format("bad magic, want 'AJPQ-MODEL v1'".into()));
    }
    let mut f = FieldReader::new(
        lines.next().ok_or_else(|| Error::Format("missing task line".into()))?,
    );
    let task = match f.expect("task")? {
        "classification" => Task::Classification,
        "detection" => Task::Detection,
        other => return Err(Error::Format(format!("unknown task '{other}'"))),
    };
    let mut f = FieldReader::new(
        lines.next().ok_or_else(|| Error::Format("missing layers line".into()))?,
    );
    let count = f.expect_usize("layers")?;

    let mut layers = Vec::with_capacity(count);
    let mut expect_offset = 0usize;
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("header declares more layers than present".into()))?;
        let mut f = FieldReader::new(line);
        let index = f.expect_usize("layer")?;
        let kind = kind_from(f.expect("kind")?)?;
        let in_channels = f.expect_usize("in")?;
        let out_channels = f.expect_usize("out")?;
        let kernel_size = f.expect_usize("k")?;
        let stride = f.expect_usize("stride")?;
        let input_width = f.expect_usize("w")?;
        let input_height = f.expect_usize("h")?;
        let has_bias = f.expect_usize("bias")? != 0;
        let offset = f.expect_usize("offset")?;
        let len = f.expect_usize("len")?;

        let spec = LayerSpec {
            index,
            kind,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            input_width,
            input_height,
            has_bias,
        };
        let want = layer_blob_len(&spec);
        if offset != expect_offset || len != want {
            return Err(Error::Format(format!(
                "layer {index}: blob section {offset}+{len} disagrees with shape ({expect_offset}+{want})"
            )));
        }
        if offset + len > blob.len() {
            return Err(Error::Format(format!(
                "layer {index}: blob truncated ({} bytes, need {})",
                blob.len(),
                offset + len
            )));
        }
        let floats: Vec<f32> = blob[offset..offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let kernel = floats[..spec.weight_count()].to_vec();
        let bias = floats[spec.weight_count()..].to_vec();
        layers.push(Layer::new(spec, kernel, bias)?);
        expect_offset = offset + len;
    }
    if let Some(extra) = lines.next() {
        return Err(Error::Format(format!(
            "header declares {count} layers but continues with '{extra}'"
        )));
    }
    if blob.len() != expect_offset {
        return Err(Error::Format(format!(
            "blob has {} bytes, header accounts for {expect_offset}",
            blob.len()
        )));
    }
    NetworkIR::new(layers, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> NetworkIR {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = LayerSpec::conv(0, 3, 4, 3, 1, 8, 8, true);
        let s1 = LayerSpec::depthwise(1, 4, 3, 1, 6, 6, false);
        let s2 = LayerSpec::fully_connected(2, 4, 5, true);
        let mut mk = |spec: LayerSpec| {
            let kernel = (0..spec.weight_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = if spec.has_bias {
                (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                vec![]
            };
            Layer::new(spec, kernel, bias).unwrap()
        };
        let layers = vec![mk(s0), mk(s1), mk(s2)];
        NetworkIR::new(layers, Task::Classification).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.net");
        let net = random_net(7);
        write_model(&net, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.net");
        let net = random_net(3);
        write_model(&net, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.truncate(raw.len() - 8);
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn layer_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.net");
        let net = random_net(5);
        write_model(&net, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        // Claim one extra layer in the count line (same-length byte patch).
        let at = raw.windows(8).position(|w| w == b"layers 3").unwrap();
        raw[at + 7] = b'4';
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.net");
        std::fs::write(&path, b"NOT-A-MODEL\nend\n").unwrap();
        assert!(read_model(&path).is_err());
    }
}
