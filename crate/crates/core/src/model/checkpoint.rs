//! Flat text model format.
//!
//! ```text
//! stta-model 1
//! length <L>
//! mix <out> <in>
//! <out lines of `in` weights>
//! norm <C> <eps>
//! gamma <C values>
//! beta <C values>
//! source 0|1            followed by `mean ...` and `var ...` lines when 1
//! iobmn <alpha> <L> <M> 0|1   same
//! ema <decay> 0|1             same
//! relu
//! pool
//! head <C> <K>
//! <C lines of K weights>
//! bias <K values>
//! end
//! ```
//!
//! Values are whitespace separated, row-major, written in Rust's shortest
//! round-trip float notation, so reading back is bit-exact.

use super::{Layer, Model, NormLayer};
use crate::error::{Error, Result};
use crate::iobmn::{EmaStats, IobmnState};
use crate::numerics::{ChannelStats, Tensor};

const MAGIC: &str = "stta-model";
const VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn write_stats(out: &mut String, stats: Option<&ChannelStats>) {
    if let Some(s) = stats {
        out.push_str(&format!("mean {}\nvar {}\n", join(&s.mean), join(&s.var)));
    }
}

pub(super) fn write(model: &Model) -> String {
    let mut out = format!("{MAGIC} {VERSION}\nlength {}\n", model.length);
    for layer in &model.layers {
        match layer {
            Layer::ChannelMix { weight } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                out.push_str(&format!("mix {rows} {cols}\n"));
                for row in weight.data().chunks(cols) {
                    out.push_str(&join(row));
                    out.push('\n');
                }
            }
            Layer::Norm(n) => {
                out.push_str(&format!("norm {} {:?}\n", n.channels(), n.eps));
                out.push_str(&format!("gamma {}\nbeta {}\n", join(&n.gamma), join(&n.beta)));
                out.push_str(&format!("source {}\n", n.source_stats.is_some() as u8));
                write_stats(&mut out, n.source_stats.as_ref());
                let io = &n.iobmn;
                out.push_str(&format!(
                    "iobmn {:?} {} {} {}\n",
                    io.alpha(),
                    io.length(),
                    io.count(),
                    io.is_populated() as u8
                ));
                write_stats(&mut out, io.memory_stats());
                out.push_str(&format!("ema {:?} {}\n", n.ema.decay(), n.ema.stats().is_some() as u8));
                write_stats(&mut out, n.ema.stats());
            }
            Layer::Relu => out.push_str("relu\n"),
            Layer::GlobalMeanPool => out.push_str("pool\n"),
            Layer::ClassifierHead { weight, bias } => {
                let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
                out.push_str(&format!("head {rows} {cols}\n"));
                for row in weight.data().chunks(cols) {
                    out.push_str(&join(row));
                    out.push('\n');
                }
                out.push_str(&format!("bias {}\n", join(bias.data())));
            }
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    fn next(&mut self) -> Result<Vec<&'a str>> {
        for (i, text) in self.iter.by_ref() {
            self.line = i + 1;
            let toks: Vec<&str> = text.split_whitespace().collect();
            if !toks.is_empty() {
                return Ok(toks);
            }
        }
        Err(self.err("unexpected end of file"))
    }

    fn keyword(&mut self, kw: &str) -> Result<Vec<&'a str>> {
        let toks = self.next()?;
        if toks[0] != kw {
            return Err(self.err(format!("expected `{kw}`, found `{}`", toks[0])));
        }
        Ok(toks[1..].to_vec())
    }

    fn floats(&self, toks: &[&str], n: usize) -> Result<Vec<f64>> {
        if toks.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", toks.len())));
        }
        toks.iter().map(|t| t.parse::<f64>().map_err(|_| self.err(format!("bad number `{t}`")))).collect()
    }

    fn int<T: std::str::FromStr>(&self, tok: Option<&&str>) -> Result<T> {
        let t = tok.ok_or_else(|| self.err("missing integer"))?;
        t.parse().map_err(|_| self.err(format!("bad integer `{t}`")))
    }

    fn float(&self, tok: Option<&&str>) -> Result<f64> {
        let t = tok.ok_or_else(|| self.err("missing number"))?;
        t.parse().map_err(|_| self.err(format!("bad number `{t}`")))
    }

    fn flag(&self, tok: Option<&&str>) -> Result<bool> {
        match tok.copied() {
            Some("0") => Ok(false),
            Some("1") => Ok(true),
            other => Err(self.err(format!("expected 0 or 1, found {other:?}"))),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let toks = self.next()?;
            data.extend(self.floats(&toks, cols)?);
        }
        Tensor::new(vec![rows, cols], data).map_err(|e| self.err(e.to_string()))
    }

    fn stats(&mut self, present: bool, c: usize) -> Result<Option<ChannelStats>> {
        if !present {
            return Ok(None);
        }
        let mean = self.keyword("mean")?;
        let mean = self.floats(&mean, c)?;
        let var = self.keyword("var")?;
        let var = self.floats(&var, c)?;
        ChannelStats::new(mean, var).map(Some).map_err(|e| self.err(e.to_string()))
    }
}

pub(super) fn read(text: &str) -> Result<Model> {
    let mut lines = Lines { iter: text.lines().enumerate(), line: 0 };
    let header = lines.next()?;
    if header.first() != Some(&MAGIC) {
        return Err(lines.err("not a model file"));
    }
    let version: u32 = lines.int(header.get(1))?;
    if version != VERSION {
        return Err(lines.err(format!("unsupported model version {version}")));
    }
    let length_toks = lines.keyword("length")?;
    let length: usize = lines.int(length_toks.first())?;
    let mut layers = Vec::new();
    loop {
        let toks = lines.next()?;
        let layer = match toks[0] {
            "end" => break,
            "mix" => {
                let (r, c) = (lines.int(toks.get(1))?, lines.int(toks.get(2))?);
                Layer::ChannelMix { weight: lines.matrix(r, c)? }
            }
            "norm" => {
                let c: usize = lines.int(toks.get(1))?;
                let eps = lines.float(toks.get(2))?;
                let g = lines.keyword("gamma")?;
                let gamma = lines.floats(&g, c)?;
                let b = lines.keyword("beta")?;
                let beta = lines.floats(&b, c)?;
                let s = lines.keyword("source")?;
                let source_present = lines.flag(s.first())?;
                let source_stats = lines.stats(source_present, c)?;
                let io = lines.keyword("iobmn")?;
                let alpha = lines.float(io.first())?;
                let (l, m): (usize, usize) = (lines.int(io.get(1))?, lines.int(io.get(2))?);
                let populated = lines.flag(io.get(3))?;
                let mut iobmn = IobmnState::new(alpha).map_err(|e| lines.err(e.to_string()))?;
                if let Some(mem) = lines.stats(populated, c)? {
                    iobmn.populate(mem, l, m).map_err(|e| lines.err(e.to_string()))?;
                }
                let em = lines.keyword("ema")?;
                let decay = lines.float(em.first())?;
                let ema_present = lines.flag(em.get(1))?;
                let mut ema = EmaStats::new(decay).map_err(|e| lines.err(e.to_string()))?;
                if let Some(s) = lines.stats(ema_present, c)? {
                    ema.commit(s);
                }
                Layer::Norm(NormLayer { gamma, beta, eps, source_stats, iobmn, ema })
            }
            "relu" => Layer::Relu,
            "pool" => Layer::GlobalMeanPool,
            "head" => {
                let (r, c) = (lines.int(toks.get(1))?, lines.int(toks.get(2))?);
                let weight = lines.matrix(r, c)?;
                let b = lines.keyword("bias")?;
                let bias = Tensor::new(vec![c], lines.floats(&b, c)?).map_err(|e| lines.err(e.to_string()))?;
                Layer::ClassifierHead { weight, bias }
            }
            other => return Err(lines.err(format!("unknown layer `{other}`"))),
        };
        layers.push(layer);
    }
    Model::from_layers(layers, length)
}
