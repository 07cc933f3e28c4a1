//! Gantt chart of a timeline: one row per stage, one block per event.

use std::fmt::Write;

use crate::schedule::actions::{ActionKind, Mb};
use crate::schedule::sim::Timeline;

const ROW: f64 = 36.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 24.0;
const WIDTH: f64 = 960.0;

fn color(kind: ActionKind, mb: Mb) -> &'static str {
    match (kind, mb) {
        (ActionKind::Forward, Mb::Regular(_)) => "#8ab6e8",
        (ActionKind::Backward, Mb::Regular(_)) => "#f2b880",
        (ActionKind::ExitForward, _) => "#b8e0a0",
        (ActionKind::Forward, _) => "#c9ddf2",
        (ActionKind::Backward, _) => "#f7dcc0",
    }
}

pub fn render_svg(tl: &Timeline, title: &str) -> String {
    let scale = if tl.span > 0.0 { (WIDTH - LEFT - 10.0) / tl.span } else { 1.0 };
    let height = TOP + ROW * tl.stages.len() as f64 + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14">{} (span {:.3})</text>"#, escape(title), tl.span);
    for (j, lane) in tl.stages.iter().enumerate() {
        let y = TOP + ROW * j as f64;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">stage {}</text>"#, y + ROW / 2.0 + 4.0, j + 1);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            y + ROW - 2.0,
            WIDTH - 10.0,
            y + ROW - 2.0
        );
        for e in lane {
            let x = LEFT + e.start * scale;
            let w = ((e.end - e.start) * scale).max(0.5);
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{}" stroke="#333" stroke-width="0.5"/>"##,
                y + 2.0,
                ROW - 6.0,
                color(e.kind, e.mb)
            );
            if w > 12.0 {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    x + w / 2.0,
                    y + ROW / 2.0 + 3.0,
                    e.mb
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cost::{CostModel, ExitMode};
    use crate::schedule::sim::{simulate, Variant};

    #[test]
    fn one_rect_per_event() {
        let tl = simulate(&CostModel::fig3_preset(), &Variant::new(ExitMode::Eager)).unwrap();
        let svg = render_svg(&tl, "a<b");
        let events: usize = tl.stages.iter().map(|l| l.len()).sum();
        assert_eq!(svg.matches("<rect").count(), events);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
