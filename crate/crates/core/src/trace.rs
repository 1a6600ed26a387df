//! Activation and speculation traces, and their JSON Lines file format.
//!
//! A trace file starts with a header line naming the trace kind and the
//! model shape, followed by one line per `(token, layer)` record:
//!
//! ```text
//! {"kind":"activation","num_layers":2,"num_experts":8,"top_k":2}
//! {"t":0,"l":0,"a":[1,5]}
//! {"t":0,"l":1,"a":[0,3]}
//! ```
//!
//! Speculation traces carry a guessed set `g` next to the actual set `a`
//! and have no records for layer 0. Expert sets are written sorted
//! ascending, so serialization is canonical.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of layers, experts per layer and experts activated per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

impl ModelShape {
    pub fn new(num_layers: usize, num_experts: usize, top_k: usize) -> Result<Self> {
        let shape = ModelShape {
            num_layers,
            num_experts,
            top_k,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must be in [1, num_experts={}], got {}",
                self.num_experts, self.top_k
            )));
        }
        Ok(())
    }
}

impl Default for ModelShape {
    /// Mixtral 8x7B: 32 MoE layers, 8 experts, top-2 routing.
    fn default() -> Self {
        ModelShape {
            num_layers: 32,
            num_experts: 8,
            top_k: 2,
        }
    }
}

/// 0-based expert index within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(pub u32);

impl ExpertId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ExpertId {
    fn from(i: usize) -> Self {
        ExpertId(i as u32)
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A duplicate-free set of experts, kept sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpertSet(Vec<ExpertId>);

impl ExpertSet {
    pub fn new() -> Self {
        ExpertSet(Vec::new())
    }

    /// Builds a set from ids in any order. Returns the offending id if any
    /// id appears twice.
    pub fn from_ids<I>(ids: I) -> std::result::Result<Self, ExpertId>
    where
        I: IntoIterator,
        I::Item: Into<ExpertId>,
    {
        let mut v: Vec<ExpertId> = ids.into_iter().map(Into::into).collect();
        v.sort_unstable();
        if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
            return Err(w[0]);
        }
        Ok(ExpertSet(v))
    }

    /// Like [`ExpertSet::from_ids`] but silently drops duplicates.
    pub fn collect_dedup<I>(ids: I) -> Self
    where
        I: IntoIterator,
        I::Item: Into<ExpertId>,
    {
        let mut v: Vec<ExpertId> = ids.into_iter().map(Into::into).collect();
        v.sort_unstable();
        v.dedup();
        ExpertSet(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[ExpertId] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, e: ExpertId) -> bool {
        self.0.binary_search(&e).is_ok()
    }

    pub fn insert(&mut self, e: ExpertId) -> bool {
        match self.0.binary_search(&e) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, e);
                true
            }
        }
    }

    pub fn remove(&mut self, e: ExpertId) -> bool {
        match self.0.binary_search(&e) {
            Ok(pos) => {
                self.0.remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    pub fn intersection(&self, other: &ExpertSet) -> ExpertSet {
        ExpertSet(self.iter().filter(|e| other.contains(*e)).collect())
    }

    pub fn difference(&self, other: &ExpertSet) -> ExpertSet {
        ExpertSet(self.iter().filter(|e| !other.contains(*e)).collect())
    }

    pub fn union(&self, other: &ExpertSet) -> ExpertSet {
        let mut out = self.clone();
        for e in other.iter() {
            out.insert(e);
        }
        out
    }

    pub fn intersection_len(&self, other: &ExpertSet) -> usize {
        self.iter().filter(|e| other.contains(*e)).count()
    }

    pub fn largest(&self) -> Option<ExpertId> {
        self.0.last().copied()
    }

    fn raw(&self) -> Vec<u32> {
        self.0.iter().map(|e| e.0).collect()
    }
}

impl<'a> IntoIterator for &'a ExpertSet {
    type Item = ExpertId;
    type IntoIter = std::iter::Copied<std::slice::Iter<'a, ExpertId>>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter().copied()
    }
}

/// Experts activated by one token at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRecord {
    pub token: usize,
    pub layer: usize,
    pub activated: ExpertSet,
}

/// Guessed and actual experts for one token at one layer (layer >= 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeculationRecord {
    pub token: usize,
    pub layer: usize,
    pub guessed: ExpertSet,
    pub actual: ExpertSet,
}

fn check_set(shape: &ModelShape, set: &ExpertSet, what: &str, line: Option<usize>) -> Result<()> {
    if set.len() != shape.top_k {
        return Err(Error::invalid(
            line,
            format!(
                "{what} set has {} experts, expected top_k={}",
                set.len(),
                shape.top_k
            ),
        ));
    }
    if let Some(max) = set.largest() {
        if max.index() >= shape.num_experts {
            return Err(Error::invalid(
                line,
                format!(
                    "expert {max} out of range for num_experts={}",
                    shape.num_experts
                ),
            ));
        }
    }
    Ok(())
}

/// Checks that `keys`, already sorted, are exactly the grid
/// `{0..n} x {first_layer..num_layers}` in row-major order.
fn check_grid(
    keys: impl ExactSizeIterator<Item = (usize, usize)>,
    first_layer: usize,
    num_layers: usize,
) -> Result<()> {
    let per_token = num_layers - first_layer;
    for (i, (token, layer)) in keys.enumerate() {
        let want = (i / per_token, first_layer + i % per_token);
        if (token, layer) != want {
            let message = if i > 0 && (token, layer) < want {
                format!("duplicate record for token {token}, layer {layer}")
            } else {
                format!(
                    "missing record for token {}, layer {} (next record is token {token}, layer {layer})",
                    want.0, want.1
                )
            };
            return Err(Error::invalid(None, message));
        }
    }
    Ok(())
}

/// Per-token, per-layer activated experts.
///
/// Records are ordered by `(token, layer)` and form a complete grid: exactly
/// one record for every layer of every token `0..num_tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTrace {
    shape: ModelShape,
    records: Vec<ActivationRecord>,
}

impl ActivationTrace {
    /// Validates and normalizes `records` (any order) into a trace.
    pub fn new(shape: ModelShape, mut records: Vec<ActivationRecord>) -> Result<Self> {
        shape.validate()?;
        for r in &records {
            if r.layer >= shape.num_layers {
                return Err(Error::invalid(
                    None,
                    format!(
                        "layer {} out of range for num_layers={}",
                        r.layer, shape.num_layers
                    ),
                ));
            }
            check_set(&shape, &r.activated, "activated", None)?;
        }
        records.sort_by_key(|r| (r.token, r.layer));
        check_grid(
            records.iter().map(|r| (r.token, r.layer)),
            0,
            shape.num_layers,
        )?;
        Ok(ActivationTrace { shape, records })
    }

    /// Builds a trace from a token-major table `sets[token][layer]`.
    pub fn from_sets(shape: ModelShape, sets: Vec<Vec<ExpertSet>>) -> Result<Self> {
        let records = sets
            .into_iter()
            .enumerate()
            .flat_map(|(token, layers)| {
                layers
                    .into_iter()
                    .enumerate()
                    .map(move |(layer, activated)| ActivationRecord {
                        token,
                        layer,
                        activated,
                    })
            })
            .collect();
        Self::new(shape, records)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn num_tokens(&self) -> usize {
        self.records.len() / self.shape.num_layers
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, token: usize, layer: usize) -> Option<&ExpertSet> {
        if layer >= self.shape.num_layers {
            return None;
        }
        self.records
            .get(token * self.shape.num_layers + layer)
            .map(|r| &r.activated)
    }

    /// The activated sets of one layer, in token order.
    pub fn layer_sets(&self, layer: usize) -> impl Iterator<Item = &ExpertSet> + '_ {
        let stride = self.shape.num_layers;
        self.records
            .iter()
            .skip(layer)
            .step_by(stride)
            .map(|r| &r.activated)
    }
}

/// Per-token guesses for layers `1..num_layers`, aligned with the actual
/// activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeculationTrace {
    shape: ModelShape,
    records: Vec<SpeculationRecord>,
}

impl SpeculationTrace {
    pub fn new(shape: ModelShape, mut records: Vec<SpeculationRecord>) -> Result<Self> {
        shape.validate()?;
        for r in &records {
            if r.layer == 0 {
                return Err(Error::invalid(
                    None,
                    format!("token {}: speculation records start at layer 1", r.token),
                ));
            }
            if r.layer >= shape.num_layers {
                return Err(Error::invalid(
                    None,
                    format!(
                        "layer {} out of range for num_layers={}",
                        r.layer, shape.num_layers
                    ),
                ));
            }
            check_set(&shape, &r.guessed, "guessed", None)?;
            check_set(&shape, &r.actual, "actual", None)?;
        }
        records.sort_by_key(|r| (r.token, r.layer));
        if shape.num_layers > 1 {
            check_grid(
                records.iter().map(|r| (r.token, r.layer)),
                1,
                shape.num_layers,
            )?;
        }
        Ok(SpeculationTrace { shape, records })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn records(&self) -> &[SpeculationRecord] {
        &self.records
    }

    pub fn num_tokens(&self) -> usize {
        match self.shape.num_layers {
            1 => 0,
            l => self.records.len() / (l - 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one token, ordered by layer.
    pub fn token_records(&self, token: usize) -> &[SpeculationRecord] {
        let per = self.shape.num_layers.saturating_sub(1);
        let start = (token * per).min(self.records.len());
        let end = (start + per).min(self.records.len());
        &self.records[start..end]
    }
}

/// Either kind of trace, as read from a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trace {
    Activation(ActivationTrace),
    Speculation(SpeculationTrace),
}

impl From<ActivationTrace> for Trace {
    fn from(t: ActivationTrace) -> Self {
        Trace::Activation(t)
    }
}

impl From<SpeculationTrace> for Trace {
    fn from(t: SpeculationTrace) -> Self {
        Trace::Speculation(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TraceKind {
    Activation,
    Speculation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: TraceKind,
    num_layers: usize,
    num_experts: usize,
    top_k: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationLine {
    t: usize,
    l: usize,
    a: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeculationLine {
    t: usize,
    l: usize,
    g: Vec<u32>,
    a: Vec<u32>,
}

pub(crate) fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)
        .map_err(|e| Error::io("writing trace line", e.into()))?;
    out.write_all(b"\n")
        .map_err(|e| Error::io("writing trace line", e))
}

/// Writes a trace in the JSON Lines format.
pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    match trace {
        Trace::Activation(t) => {
            write_json_line(&mut out, &header(TraceKind::Activation, t.shape))?;
            for r in &t.records {
                let line = ActivationLine {
                    t: r.token,
                    l: r.layer,
                    a: r.activated.raw(),
                };
                write_json_line(&mut out, &line)?;
            }
        }
        Trace::Speculation(t) => {
            write_json_line(&mut out, &header(TraceKind::Speculation, t.shape))?;
            for r in &t.records {
                let line = SpeculationLine {
                    t: r.token,
                    l: r.layer,
                    g: r.guessed.raw(),
                    a: r.actual.raw(),
                };
                write_json_line(&mut out, &line)?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("flushing trace", e))
}

fn header(kind: TraceKind, shape: ModelShape) -> Header {
    Header {
        kind,
        num_layers: shape.num_layers,
        num_experts: shape.num_experts,
        top_k: shape.top_k,
    }
}

/// Serializes a trace to a string.
pub fn trace_to_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

pub(crate) fn parse_line<T: for<'de> Deserialize<'de>>(text: &str, line: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

pub(crate) fn parse_set(
    shape: &ModelShape,
    raw: Vec<u32>,
    what: &str,
    line: usize,
) -> Result<ExpertSet> {
    let set = ExpertSet::from_ids(raw.into_iter().map(ExpertId)).map_err(|dup| {
        Error::invalid(Some(line), format!("duplicate expert {dup} in {what} set"))
    })?;
    check_set(shape, &set, what, Some(line))?;
    Ok(set)
}

/// Iterates over the lines of a JSONL source, yielding 1-based line numbers.
pub(crate) fn numbered_lines<R: BufRead>(
    source: R,
) -> impl Iterator<Item = Result<(usize, String)>> {
    source.lines().enumerate().map(|(i, line)| {
        line.map(|l| (i + 1, l))
            .map_err(|e| Error::io(format!("reading line {}", i + 1), e))
    })
}

/// Reads a trace written by [`write_trace`].
///
/// Record lines may appear in any order; the result is normalized to
/// `(token, layer)` order. Every malformed or inconsistent input yields an
/// error.
pub fn read_trace<R: BufRead>(source: R) -> Result<Trace> {
    let mut lines = numbered_lines(source);
    let (_, first) = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let hdr: Header = parse_line(&first, 1)?;
    let shape = ModelShape {
        num_layers: hdr.num_layers,
        num_experts: hdr.num_experts,
        top_k: hdr.top_k,
    };
    shape
        .validate()
        .map_err(|e| Error::invalid(Some(1), e.to_string()))?;

    match hdr.kind {
        TraceKind::Activation => {
            let mut records = Vec::new();
            for item in lines {
                let (n, text) = item?;
                let line: ActivationLine = parse_line(&text, n)?;
                check_layer(&shape, line.l, 0, n)?;
                records.push(ActivationRecord {
                    token: line.t,
                    layer: line.l,
                    activated: parse_set(&shape, line.a, "activated", n)?,
                });
            }
            Ok(Trace::Activation(ActivationTrace::new(shape, records)?))
        }
        TraceKind::Speculation => {
            let mut records = Vec::new();
            for item in lines {
                let (n, text) = item?;
                let line: SpeculationLine = parse_line(&text, n)?;
                check_layer(&shape, line.l, 1, n)?;
                records.push(SpeculationRecord {
                    token: line.t,
                    layer: line.l,
                    guessed: parse_set(&shape, line.g, "guessed", n)?,
                    actual: parse_set(&shape, line.a, "actual", n)?,
                });
            }
            Ok(Trace::Speculation(SpeculationTrace::new(shape, records)?))
        }
    }
}

fn check_layer(shape: &ModelShape, layer: usize, min: usize, line: usize) -> Result<()> {
    if layer < min || layer >= shape.num_layers {
        return Err(Error::invalid(
            Some(line),
            format!(
                "layer {layer} out of range [{min}, {})",
                shape.num_layers
            ),
        ));
    }
    Ok(())
}

/// Reads a file that must hold an activation trace.
pub fn read_activation_trace<R: BufRead>(source: R) -> Result<ActivationTrace> {
    match read_trace(source)? {
        Trace::Activation(t) => Ok(t),
        Trace::Speculation(_) => Err(Error::invalid(
            Some(1),
            "expected an activation trace, found a speculation trace",
        )),
    }
}

/// Reads a file that must hold a speculation trace.
pub fn read_speculation_trace<R: BufRead>(source: R) -> Result<SpeculationTrace> {
    match read_trace(source)? {
        Trace::Speculation(t) => Ok(t),
        Trace::Activation(_) => Err(Error::invalid(
            Some(1),
            "expected a speculation trace, found an activation trace",
        )),
    }
}
