//! Pie-diagram frames: each agent's share of the conserved total as a slice.
//!
//! Slices keep the exact fraction `x_i / chi`; degrees are derived from it,
//! so the angles of a frame always sum to exactly 360.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Trace, TraceRecord};
use crate::events::PatchDetail;
use crate::graph::AgentId;
use crate::TOOL_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub agent: AgentId,
    /// Agent state `x_i`.
    pub numerator: u64,
    /// Conserved total `chi`.
    pub denominator: u64,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Slice {
    /// Angle as a reduced fraction of degrees.
    pub fn degrees_ratio(&self) -> (u128, u128) {
        let num = 360 * u128::from(self.numerator);
        let den = u128::from(self.denominator);
        let g = gcd(num, den).max(1);
        (num / g, den / g)
    }

    pub fn degrees(&self) -> f64 {
        360.0 * self.numerator as f64 / self.denominator as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieFrame {
    pub epoch: u64,
    pub tick: u64,
    /// Slices in increasing agent id order.
    pub slices: Vec<Slice>,
}

impl PieFrame {
    fn of(epoch: u64, tick: u64, chi: u64, x: &BTreeMap<AgentId, u64>) -> Self {
        PieFrame {
            epoch,
            tick,
            slices: x
                .iter()
                .map(|(&agent, &v)| Slice {
                    agent,
                    numerator: v,
                    denominator: chi,
                })
                .collect(),
        }
    }

    /// Exact sum of slice angles as a reduced fraction.
    pub fn total_degrees(&self) -> (u128, u128) {
        self.slices.iter().fold((0u128, 1u128), |(an, ad), s| {
            let (bn, bd) = s.degrees_ratio();
            let (n, d) = (an * bd + bn * ad, ad * bd);
            let g = gcd(n, d).max(1);
            (n / g, d / g)
        })
    }
}

/// One frame at t_0 and after every critical event; with `per_tick`, also
/// one after every gossip step.
pub fn export_pie_frames(trace: &Trace, per_tick: bool) -> Vec<PieFrame> {
    let chi = trace.config.chi();
    let mut x = trace.config.states.clone();
    let mut epoch = 0;
    let mut frames = vec![PieFrame::of(0, 0, chi, &x)];
    for r in &trace.records {
        match r {
            TraceRecord::Gossip(g) => {
                x.insert(g.edge.lo(), g.lo_state);
                x.insert(g.edge.hi(), g.hi_state);
                if per_tick {
                    frames.push(PieFrame::of(epoch, g.tick + 1, chi, &x));
                }
            }
            TraceRecord::Event(ev) => {
                x.remove(&ev.patch.subject);
                if let PatchDetail::Duplication {
                    children, split, ..
                } = &ev.patch.detail
                {
                    x.insert(children[0], split.alpha);
                    x.insert(children[1], split.beta);
                }
                epoch = ev.epoch;
                frames.push(PieFrame::of(epoch, ev.tick, chi, &x));
            }
        }
    }
    frames
}

pub fn frames_to_csv(trace: &Trace, frames: &[PieFrame]) -> String {
    let mut out = format!("# {TOOL_VERSION} config={}\n", trace.config.hash());
    out.push_str("epoch,tick,agent,numerator,denominator,degrees\n");
    for f in frames {
        for s in &f.slices {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                f.epoch,
                f.tick,
                s.agent,
                s.numerator,
                s.denominator,
                s.degrees()
            );
        }
    }
    out
}

/// Standalone SVG rendering of one frame.
pub fn frame_to_svg(frame: &PieFrame) -> String {
    const R: f64 = 100.0;
    const C: f64 = 110.0;
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"220\" height=\"240\" viewBox=\"0 0 220 240\">\n",
    );
    let _ = writeln!(
        out,
        "<text x=\"110\" y=\"234\" text-anchor=\"middle\" font-size=\"12\">epoch {} tick {}</text>",
        frame.epoch, frame.tick
    );
    let live: Vec<&Slice> = frame.slices.iter().filter(|s| s.numerator > 0).collect();
    if let [only] = live.as_slice() {
        let _ = writeln!(
            out,
            "<circle cx=\"{C}\" cy=\"{C}\" r=\"{R}\" fill=\"{}\" stroke=\"black\"><title>agent {}</title></circle>",
            color(only.agent),
            only.agent
        );
    } else {
        let mut start = 0.0f64;
        for s in live {
            let sweep = s.degrees();
            let end = start + sweep;
            let (x0, y0) = point(start, R, C);
            let (x1, y1) = point(end, R, C);
            let large = u8::from(sweep > 180.0);
            let _ = writeln!(
                out,
                "<path d=\"M{C},{C} L{x0:.3},{y0:.3} A{R},{R} 0 {large} 1 {x1:.3},{y1:.3} Z\" fill=\"{}\" stroke=\"black\"><title>agent {} {}/{}</title></path>",
                color(s.agent),
                s.agent,
                s.numerator,
                s.denominator
            );
            start = end;
        }
    }
    out.push_str("</svg>\n");
    out
}

fn point(deg: f64, r: f64, c: f64) -> (f64, f64) {
    let rad = (deg - 90.0).to_radians();
    (c + r * rad.cos(), c + r * rad.sin())
}

fn color(agent: AgentId) -> String {
    // Golden-angle hue spacing keeps neighbouring ids distinguishable.
    let hue = (agent.0.wrapping_mul(137) % 360) as u32;
    format!("hsl({hue},65%,60%)")
}
