//! Rug plot of per-example atom effect distributions (SVG plus a CSV of the
//! plotted numbers).
//!
//! One vertical strip per example, ordered left to right by the share of
//! weakening atom labels. The strip hue is the example's gold label (green
//! for strengtheners, red for weakeners). Inside a strip, five bands stack
//! from +2 at the top to −2 at the bottom; each band's height is its share of
//! the example's valid atom labels and its shade encodes magnitude: dark for
//! ±2, light for ±1, pale for 0.

use std::fmt::Write as _;

use atomic_nli::model::{Atom, DefeasibleExample, DefeasibleLabel, EffectScore};
use atomic_nli::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RugPlotSlice {
    pub example_id: String,
    pub gold: DefeasibleLabel,
    /// Counts of effects −2, −1, 0, +1, +2 in that order.
    pub effect_histogram: [u32; 5],
    pub weakener_proportion: f64,
}

impl RugPlotSlice {
    pub fn new(example_id: &str, gold: DefeasibleLabel, effect_histogram: [u32; 5]) -> Self {
        let negative = effect_histogram[0] + effect_histogram[1];
        let nonzero = negative + effect_histogram[3] + effect_histogram[4];
        let weakener_proportion = if nonzero == 0 { 0.0 } else { f64::from(negative) / f64::from(nonzero) };
        RugPlotSlice { example_id: example_id.to_string(), gold, effect_histogram, weakener_proportion }
    }

    pub fn total(&self) -> u32 {
        self.effect_histogram.iter().sum()
    }
}

/// One slice per example from the human-valid atom effects.
pub fn slices_from(examples: &[DefeasibleExample], atoms: &[Atom]) -> Vec<RugPlotSlice> {
    examples
        .iter()
        .map(|ex| {
            let mut histogram = [0u32; 5];
            for atom in atoms.iter().filter(|a| a.parent_example_id == ex.id && a.human_valid == Some(true)) {
                if let Some(v) = atom.effect_gold.and_then(|e| e.value()) {
                    histogram[(v + 2) as usize] += 1;
                }
            }
            RugPlotSlice::new(&ex.id, ex.gold, histogram)
        })
        .collect()
}

/// Ascending weakener proportion, ties by example id.
pub fn sort_slices(slices: &mut [RugPlotSlice]) {
    slices.sort_by(|a, b| {
        a.weakener_proportion.total_cmp(&b.weakener_proportion).then_with(|| a.example_id.cmp(&b.example_id))
    });
}

const STRIP_WIDTH: f64 = 8.0;
const STRIP_GAP: f64 = 2.0;
const PLOT_HEIGHT: f64 = 160.0;
const MARGIN: f64 = 20.0;
const LEGEND_HEIGHT: f64 = 40.0;

/// Dark, light and pale shades for one hue.
fn palette(gold: DefeasibleLabel) -> [&'static str; 3] {
    match gold {
        DefeasibleLabel::Strengthener => ["#1b7837", "#7fbf7b", "#d9f0d3"],
        DefeasibleLabel::Weakener => ["#b2182b", "#ef8a62", "#fddbc7"],
    }
}

fn shade(gold: DefeasibleLabel, effect: i8) -> &'static str {
    palette(gold)[2 - effect.unsigned_abs() as usize]
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders already-sorted slices. Coordinates carry three decimals so the
/// output is stable byte for byte.
pub fn render_svg(slices: &[RugPlotSlice], run_id: &str) -> Result<String> {
    if slices.is_empty() {
        return Err(Error::Precondition("rug plot needs at least one example".into()));
    }
    let width = 2.0 * MARGIN + slices.len() as f64 * (STRIP_WIDTH + STRIP_GAP) - STRIP_GAP;
    let width = width.max(260.0);
    let height = 2.0 * MARGIN + PLOT_HEIGHT + LEGEND_HEIGHT;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.3}" height="{height:.3}" viewBox="0 0 {width:.3} {height:.3}">"#
    );
    let _ = writeln!(svg, "<metadata>run_id={}</metadata>", escape(run_id));
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{width:.3}" height="{height:.3}" fill="#ffffff"/>"##);
    for (i, slice) in slices.iter().enumerate() {
        let x = MARGIN + i as f64 * (STRIP_WIDTH + STRIP_GAP);
        let dark = palette(slice.gold)[0];
        let _ = writeln!(
            svg,
            r#"<g id="slice-{}" data-gold="{}" data-weakener-proportion="{:.6}">"#,
            escape(&slice.example_id),
            slice.gold.as_str(),
            slice.weakener_proportion
        );
        let total = slice.total();
        if total > 0 {
            let mut y = MARGIN;
            for effect in (-2i8..=2).rev() {
                let count = slice.effect_histogram[(effect + 2) as usize];
                if count == 0 {
                    continue;
                }
                let h = PLOT_HEIGHT * f64::from(count) / f64::from(total);
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.3}" y="{y:.3}" width="{STRIP_WIDTH:.3}" height="{h:.3}" fill="{}"><title>{} {}: {count}</title></rect>"#,
                    shade(slice.gold, effect),
                    escape(&slice.example_id),
                    EffectScore::Score(effect)
                );
                y += h;
            }
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.3}" y="{MARGIN:.3}" width="{STRIP_WIDTH:.3}" height="{PLOT_HEIGHT:.3}" fill="none" stroke="{dark}" stroke-width="0.5"/>"#
        );
        svg.push_str("</g>\n");
    }
    // One legend row per hue.
    for (row, gold) in [DefeasibleLabel::Strengthener, DefeasibleLabel::Weakener].into_iter().enumerate() {
        let y = MARGIN + PLOT_HEIGHT + 8.0 + 14.0 * row as f64;
        for (k, label) in ["|2|", "|1|", "0"].iter().enumerate() {
            let lx = MARGIN + 72.0 * k as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{lx:.3}" y="{y:.3}" width="10.000" height="10.000" fill="{}"/>"#,
                palette(gold)[k]
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="8">{} {label}</text>"#,
                lx + 12.0,
                y + 8.0,
                gold.as_str()
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// The plotted numbers, one row per slice in plot order.
pub fn render_csv(slices: &[RugPlotSlice], run_id: &str) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    writer
        .write_record([
            "run_id",
            "position",
            "example_id",
            "gold",
            "effect_m2",
            "effect_m1",
            "effect_0",
            "effect_p1",
            "effect_p2",
            "weakener_proportion",
        ])
        .map_err(io)?;
    for (i, s) in slices.iter().enumerate() {
        let mut row = vec![run_id.to_string(), i.to_string(), s.example_id.clone(), s.gold.as_str().to_string()];
        row.extend(s.effect_histogram.iter().map(u32::to_string));
        row.push(format!("{:.6}", s.weakener_proportion));
        writer.write_record(&row).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn proportion_ignores_zero_effects() {
        let s = RugPlotSlice::new("x", DefeasibleLabel::Weakener, [1, 2, 5, 1, 0]);
        assert!((s.weakener_proportion - 0.75).abs() < 1e-15);
        assert_eq!(RugPlotSlice::new("y", DefeasibleLabel::Weakener, [0, 0, 3, 0, 0]).weakener_proportion, 0.0);
    }

    #[test]
    fn ascending_order_puts_lower_share_left() {
        let mut slices = vec![
            RugPlotSlice::new("a", DefeasibleLabel::Weakener, [4, 0, 0, 1, 0]),
            RugPlotSlice::new("b", DefeasibleLabel::Strengthener, [1, 0, 0, 4, 0]),
        ];
        sort_slices(&mut slices);
        assert_eq!(slices[0].example_id, "b");
        assert!((slices[0].weakener_proportion - 0.2).abs() < 1e-15);
        assert!((slices[1].weakener_proportion - 0.8).abs() < 1e-15);
    }

    #[test]
    fn all_strengthener_input_keeps_id_order_and_one_hue() {
        let mut slices: Vec<_> = ["e3", "e1", "e2"]
            .iter()
            .map(|id| RugPlotSlice::new(id, DefeasibleLabel::Strengthener, [0, 0, 0, 2, 1]))
            .collect();
        sort_slices(&mut slices);
        let ids: Vec<_> = slices.iter().map(|s| s.example_id.as_str()).collect();
        assert_eq!(ids, ["e1", "e2", "e3"]);
        let svg = render_svg(&slices, "r0").unwrap();
        let strips: Vec<&str> = svg.split("<g id=").skip(1).map(|s| s.split("</g>").next().unwrap()).collect();
        assert!(strips.iter().all(|s| !s.contains("#b2182b") && !s.contains("#ef8a62") && !s.contains("#fddbc7")));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(render_svg(&[], "r").is_err());
    }

    #[test]
    fn csv_carries_plotted_numbers() {
        let slices = vec![RugPlotSlice::new("x", DefeasibleLabel::Weakener, [1, 0, 0, 0, 1])];
        let text = render_csv(&slices, "r9").unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "r9,0,x,weakener,1,0,0,0,1,0.500000");
    }

    proptest! {
        #[test]
        fn sorted_output_is_monotone(hists in prop::collection::vec(prop::array::uniform5(0u32..4), 1..30)) {
            let mut slices: Vec<_> = hists
                .iter()
                .enumerate()
                .map(|(i, h)| RugPlotSlice::new(&format!("e{i:02}"), DefeasibleLabel::Weakener, *h))
                .collect();
            sort_slices(&mut slices);
            for w in slices.windows(2) {
                prop_assert!(w[0].weakener_proportion <= w[1].weakener_proportion);
            }
            let svg = render_svg(&slices, "r").unwrap();
            prop_assert_eq!(svg.matches("<g id=").count(), slices.len());
        }
    }
}
