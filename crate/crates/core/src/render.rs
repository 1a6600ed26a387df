//! SVG and plain-text figures for cache traces, speculation traces and
//! expert histograms.
//!
//! Every mark is an SVG `<rect>` with a class naming what it stands for:
//!
//! | figure      | class          | one per                                        |
//! |-------------|----------------|------------------------------------------------|
//! | cache trace | `activated`    | activated expert of a step (large square)      |
//! | cache trace | `cached`       | expert resident before a step (small square)   |
//! | speculation | `tp`/`fp`/`fn` | guessed and activated / guessed only / missed  |
//! | speculation | `fn-excluded`  | first-layer expert (never guessed, not scored) |
//! | histogram   | `bar`          | expert                                         |
//!
//! Output is deterministic and self-contained. Layers are labelled 1-based
//! for display; expert ids stay 0-based.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::ExpertHistogram;
use crate::sim::CacheEventLog;
use crate::trace::{ActivationTrace, SpeculationTrace};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub activated: String,
    pub cached: String,
    pub tp: String,
    pub fp: String,
    pub fn_: String,
    pub bar: String,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            activated: "#e6550d".into(),
            cached: "#9e9e9e".into(),
            tp: "#7b3294".into(),
            fp: "#2b83ba".into(),
            fn_: "#d7191c".into(),
            bar: "#4a6fa5".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderSpec {
    pub cell_px: u32,
    pub palette: Palette,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            cell_px: 12,
            palette: Palette::default(),
        }
    }
}

const MARGIN_LEFT: u32 = 64;
const MARGIN_TOP: u32 = 40;
const MARGIN_RIGHT: u32 = 16;
const MARGIN_BOTTOM: u32 = 40;
const HISTOGRAM_HEIGHT: f64 = 200.0;

struct Svg {
    out: String,
}

impl Svg {
    fn new(width: u32, height: u32) -> Self {
        let mut out = String::new();
        out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
        );
        let _ = writeln!(
            out,
            "<rect class=\"background\" x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>"
        );
        Svg { out }
    }

    fn rect(&mut self, class: &str, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            "<rect class=\"{class}\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, size: u32, body: &str) {
        let _ = writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-family=\"monospace\" font-size=\"{size}\">{}</text>",
            escape(body)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn check_layer(log: &CacheEventLog, layer: usize) -> Result<()> {
    if !log.has_layer(layer) {
        return Err(Error::Selection(format!(
            "layer {layer} was not simulated (simulated: {:?})",
            log.layers()
        )));
    }
    Ok(())
}

/// Token-by-expert grid of one layer's cache history: a large square per
/// activated expert and a small gray square per expert cached before the
/// token arrived.
pub fn render_cache_trace(log: &CacheEventLog, layer: usize, spec: &RenderSpec) -> Result<String> {
    check_layer(log, layer)?;
    let cell = spec.cell_px.max(2) as f64;
    let tokens = log.num_tokens();
    let experts = log.shape().num_experts;
    let width = MARGIN_LEFT + (tokens as f64 * cell) as u32 + MARGIN_RIGHT;
    let height = MARGIN_TOP + (experts as f64 * cell) as u32 + MARGIN_BOTTOM;
    let mut svg = Svg::new(width, height);
    let (x0, y0) = (MARGIN_LEFT as f64, MARGIN_TOP as f64);

    svg.text(
        x0,
        20.0,
        "start",
        14,
        &format!(
            "Layer {} - {} cache, size {}",
            layer + 1,
            log.config().policy,
            log.config().cache_size
        ),
    );
    for e in 0..experts {
        svg.text(x0 - 8.0, y0 + (e as f64 + 0.75) * cell, "end", 10, &e.to_string());
    }
    for t in (0..tokens).step_by(10) {
        svg.text(
            x0 + (t as f64 + 0.5) * cell,
            y0 + experts as f64 * cell + 14.0,
            "middle",
            10,
            &t.to_string(),
        );
    }
    svg.text(
        x0 + tokens as f64 * cell / 2.0,
        height as f64 - 8.0,
        "middle",
        11,
        "token",
    );
    svg.text(12.0, y0 + experts as f64 * cell / 2.0, "start", 11, "expert");

    let small = cell / 2.0;
    for step in log.layer_steps(layer) {
        let x = x0 + step.token as f64 * cell;
        for e in step.outcome.activated().iter() {
            let y = y0 + e.index() as f64 * cell;
            svg.rect("activated", x + 1.0, y + 1.0, cell - 2.0, cell - 2.0, &spec.palette.activated);
        }
        for e in step.resident_before().iter() {
            let y = y0 + e.index() as f64 * cell;
            let off = (cell - small) / 2.0;
            svg.rect("cached", x + off, y + off, small, small, &spec.palette.cached);
        }
    }
    Ok(svg.finish())
}

/// Layer-by-expert grid of one token's speculative guesses. If the
/// activation trace is given, the first layer's experts are drawn in the
/// false-negative color with class `fn-excluded`; they are never guessed
/// and not scored.
pub fn render_speculation(
    trace: &SpeculationTrace,
    activations: Option<&ActivationTrace>,
    token: usize,
    spec: &RenderSpec,
) -> Result<String> {
    if token >= trace.num_tokens() {
        return Err(Error::Selection(format!(
            "token {token} not present (trace has {} tokens)",
            trace.num_tokens()
        )));
    }
    let shape = trace.shape();
    let cell = spec.cell_px.max(2) as f64;
    let width = MARGIN_LEFT + (shape.num_experts as f64 * cell) as u32 + MARGIN_RIGHT + 120;
    let height = MARGIN_TOP + (shape.num_layers as f64 * cell) as u32 + MARGIN_BOTTOM;
    let mut svg = Svg::new(width, height);
    let (x0, y0) = (MARGIN_LEFT as f64, MARGIN_TOP as f64);
    let p = &spec.palette;

    svg.text(x0, 20.0, "start", 14, &format!("Token {token} - speculative loading"));
    for l in (0..shape.num_layers).step_by(4) {
        svg.text(x0 - 8.0, y0 + (l as f64 + 0.75) * cell, "end", 10, &(l + 1).to_string());
    }
    for e in 0..shape.num_experts {
        svg.text(
            x0 + (e as f64 + 0.5) * cell,
            y0 + shape.num_layers as f64 * cell + 14.0,
            "middle",
            10,
            &e.to_string(),
        );
    }
    svg.text(12.0, y0 - 6.0, "start", 11, "layer");

    let cell_at = |svg: &mut Svg, class: &str, layer: usize, e: usize, fill: &str| {
        svg.rect(
            class,
            x0 + e as f64 * cell + 1.0,
            y0 + layer as f64 * cell + 1.0,
            cell - 2.0,
            cell - 2.0,
            fill,
        );
    };

    if let Some(act) = activations {
        if act.shape() != shape {
            return Err(Error::Shape(
                "activation and speculation traces have different shapes".into(),
            ));
        }
        let first = act.get(token, 0).ok_or_else(|| {
            Error::Selection(format!("token {token} not present in the activation trace"))
        })?;
        for e in first.iter() {
            cell_at(&mut svg, "fn-excluded", 0, e.index(), &p.fn_);
        }
        svg.text(
            x0 + shape.num_experts as f64 * cell + 6.0,
            y0 + 0.75 * cell,
            "start",
            10,
            "excluded: no guess",
        );
    }

    for r in trace.token_records(token) {
        for e in r.guessed.intersection(&r.actual).iter() {
            cell_at(&mut svg, "tp", r.layer, e.index(), &p.tp);
        }
        for e in r.guessed.difference(&r.actual).iter() {
            cell_at(&mut svg, "fp", r.layer, e.index(), &p.fp);
        }
        for e in r.actual.difference(&r.guessed).iter() {
            cell_at(&mut svg, "fn", r.layer, e.index(), &p.fn_);
        }
    }
    Ok(svg.finish())
}

/// Bar chart of one layer's activation counts; the tallest bar is
/// 200 px and the others are proportional.
pub fn render_histogram(h: &ExpertHistogram, spec: &RenderSpec) -> Result<String> {
    let cell = spec.cell_px.max(2) as f64;
    let bar_w = cell * 2.0;
    let n = h.counts.len();
    let width = MARGIN_LEFT + (n as f64 * bar_w) as u32 + MARGIN_RIGHT;
    let height = MARGIN_TOP + HISTOGRAM_HEIGHT as u32 + MARGIN_BOTTOM;
    let mut svg = Svg::new(width, height);
    let (x0, base) = (MARGIN_LEFT as f64, MARGIN_TOP as f64 + HISTOGRAM_HEIGHT);

    svg.text(
        x0,
        20.0,
        "start",
        14,
        &format!("Layer {} - activated experts (gini {:.3})", h.layer + 1, h.gini),
    );
    svg.text(x0 - 8.0, base, "end", 10, "0");
    svg.text(x0 - 8.0, MARGIN_TOP as f64 + 8.0, "end", 10, &h.max_count.to_string());
    for (e, &c) in h.counts.iter().enumerate() {
        let bh = if h.max_count == 0 {
            0.0
        } else {
            HISTOGRAM_HEIGHT * c as f64 / h.max_count as f64
        };
        let x = x0 + e as f64 * bar_w;
        svg.rect("bar", x + 2.0, base - bh, bar_w - 4.0, bh, &spec.palette.bar);
        svg.text(x + bar_w / 2.0, base + 14.0, "middle", 10, &e.to_string());
    }
    Ok(svg.finish())
}

/// One row per expert, one character per token: `#` activated and cached,
/// `A` activated only, `.` cached only, space otherwise.
pub fn cache_trace_text(log: &CacheEventLog, layer: usize) -> Result<String> {
    check_layer(log, layer)?;
    let experts = log.shape().num_experts;
    let tokens = log.num_tokens();
    let mut grid = vec![vec![' '; tokens]; experts];
    for step in log.layer_steps(layer) {
        let active = step.outcome.activated();
        for (e, row) in grid.iter_mut().enumerate() {
            let id = e.into();
            row[step.token] = match (active.contains(id), step.resident_before().contains(id)) {
                (true, true) => '#',
                (true, false) => 'A',
                (false, true) => '.',
                (false, false) => ' ',
            };
        }
    }
    let mut out = format!("layer {}\n", layer + 1);
    for (e, row) in grid.iter().enumerate() {
        let _ = writeln!(out, "{e:>3} |{}|", row.iter().collect::<String>());
    }
    Ok(out)
}

/// One row per layer, one character per expert: `+` true positive, `g`
/// false positive, `x` false negative. The first row shows the first
/// layer's experts as `x` when activations are given.
pub fn speculation_text(
    trace: &SpeculationTrace,
    activations: Option<&ActivationTrace>,
    token: usize,
) -> Result<String> {
    if token >= trace.num_tokens() {
        return Err(Error::Selection(format!(
            "token {token} not present (trace has {} tokens)",
            trace.num_tokens()
        )));
    }
    let shape = trace.shape();
    let mut grid = vec![vec![' '; shape.num_experts]; shape.num_layers];
    if let Some(first) = activations.and_then(|a| a.get(token, 0)) {
        for e in first.iter() {
            grid[0][e.index()] = 'x';
        }
    }
    for r in trace.token_records(token) {
        for e in r.guessed.iter() {
            grid[r.layer][e.index()] = if r.actual.contains(e) { '+' } else { 'g' };
        }
        for e in r.actual.difference(&r.guessed).iter() {
            grid[r.layer][e.index()] = 'x';
        }
    }
    let mut out = format!("token {token}\n");
    for (l, row) in grid.iter().enumerate() {
        let note = if l == 0 { " excluded" } else { "" };
        let _ = writeln!(out, "{:>3} |{}|{note}", l + 1, row.iter().collect::<String>());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::expert_histograms;
    use crate::policy::PolicyKind;
    use crate::sim::{simulate, SimConfig};
    use crate::trace::{ExpertId, ExpertSet, ModelShape, SpeculationRecord};

    fn set(ids: &[u32]) -> ExpertSet {
        ExpertSet::from_ids(ids.iter().map(|&i| ExpertId(i))).unwrap()
    }

    fn count(svg: &str, class: &str) -> usize {
        svg.matches(&format!("class=\"{class}\"")).count()
    }

    fn one_layer_log(sets: &[&[u32]], c: usize) -> CacheEventLog {
        let shape = ModelShape::new(1, 8, 2).unwrap();
        let trace = ActivationTrace::from_sets(shape, sets.iter().map(|s| vec![set(s)]).collect()).unwrap();
        simulate(&trace, &SimConfig::new(PolicyKind::Lru, c)).unwrap()
    }

    #[test]
    fn single_token_has_two_large_squares() {
        let log = one_layer_log(&[&[0, 1]], 4);
        let svg = render_cache_trace(&log, 0, &RenderSpec::default()).unwrap();
        assert_eq!(count(&svg, "activated"), 2);
        assert_eq!(count(&svg, "cached"), 0);
        assert!(svg.contains("Layer 1"));
    }

    #[test]
    fn cache_trace_is_deterministic_and_checks_layer() {
        let log = one_layer_log(&[&[0, 1], &[1, 2], &[3, 4]], 3);
        let a = render_cache_trace(&log, 0, &RenderSpec::default()).unwrap();
        assert_eq!(a, render_cache_trace(&log, 0, &RenderSpec::default()).unwrap());
        assert_eq!(count(&a, "cached"), 2 + 3);
        assert!(matches!(
            render_cache_trace(&log, 1, &RenderSpec::default()),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn cache_text_grid() {
        let log = one_layer_log(&[&[0, 1], &[1, 2]], 3);
        let text = cache_trace_text(&log, 0).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "layer 1");
        assert_eq!(rows[1], "  0 |A.|");
        assert_eq!(rows[2], "  1 |A#|");
        assert_eq!(rows[3], "  2 | A|");
        assert_eq!(rows[4], "  3 |  |");
    }

    fn spec_trace() -> (SpeculationTrace, ActivationTrace) {
        let shape = ModelShape::new(3, 4, 2).unwrap();
        let spec = SpeculationTrace::new(
            shape,
            vec![
                SpeculationRecord { token: 0, layer: 1, guessed: set(&[0, 1]), actual: set(&[1, 2]) },
                SpeculationRecord { token: 0, layer: 2, guessed: set(&[2, 3]), actual: set(&[2, 3]) },
            ],
        )
        .unwrap();
        let act = ActivationTrace::from_sets(shape, vec![vec![set(&[0, 3]), set(&[1, 2]), set(&[2, 3])]]).unwrap();
        (spec, act)
    }

    #[test]
    fn speculation_cells() {
        let (spec, act) = spec_trace();
        let svg = render_speculation(&spec, Some(&act), 0, &RenderSpec::default()).unwrap();
        assert_eq!(count(&svg, "tp"), 3);
        assert_eq!(count(&svg, "fp"), 1);
        assert_eq!(count(&svg, "fn"), 1);
        assert_eq!(count(&svg, "fn-excluded"), 2);
        assert!(render_speculation(&spec, None, 1, &RenderSpec::default()).is_err());

        let text = speculation_text(&spec, Some(&act), 0).unwrap();
        assert_eq!(text, "token 0\n  1 |x  x| excluded\n  2 |g+x |\n  3 |  ++|\n");
    }

    #[test]
    fn histogram_bars() {
        let shape = ModelShape::new(1, 4, 1).unwrap();
        let trace = ActivationTrace::from_sets(
            shape,
            [0u32, 0, 0, 0, 1, 1].iter().map(|&e| vec![set(&[e])]).collect(),
        )
        .unwrap();
        let h = &expert_histograms(&trace)[0];
        let svg = render_histogram(h, &RenderSpec::default()).unwrap();
        assert_eq!(count(&svg, "bar"), 4);
        assert!(svg.contains("height=\"200.00\""));
        assert!(svg.contains("height=\"100.00\""));
        assert_eq!(svg.matches("height=\"0.00\"").count(), 2);
    }
}
