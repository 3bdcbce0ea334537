use std::fmt::Write as _;

use crate::domain::{Category, SimConfig};
use crate::simenv::EpisodeRecord;

const SLOT_PX: f64 = 8.0;
const LANE_PX: f64 = 28.0;
const BAR_PX: f64 = 20.0;
const LEFT: f64 = 56.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 28.0;
const RIGHT: f64 = 24.0;

/// A rendered day: SVG document and a plain-text timeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gantt {
    pub svg: String,
    pub timeline: String,
}

fn fill(category: Category) -> &'static str {
    match category {
        Category::Elective => "#4c78a8",
        Category::Urgent => "#f58518",
        Category::Emergency => "#e45756",
    }
}

/// One lane per room. The changeover at the head of each block is drawn
/// hatched over `[start, start + setup)`, the case itself over
/// `[start + setup, finish)`. A solid marker sits at the horizon and a
/// dashed one at the emergency event, if any.
pub fn export_gantt(episode: &EpisodeRecord, config: &SimConfig) -> Gantt {
    let horizon = episode.horizon;
    let end = episode.or_last_finish.iter().copied().max().unwrap_or(0).max(horizon);
    let width = LEFT + end as f64 * SLOT_PX + RIGHT;
    let height = TOP + episode.num_ors as f64 * LANE_PX + BOTTOM;
    let x = |slot: u32| LEFT + slot as f64 * SLOT_PX;

    let mut cases: Vec<_> = episode.served().collect();
    cases.sort_by_key(|(p, o)| (o.or, o.start, p.id));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    svg.push_str(
        r##"<defs><pattern id="setup-hatch" width="4" height="4" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="4" height="4" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="4" stroke="#555555" stroke-width="1.5"/></pattern></defs>
"##,
    );
    let _ = writeln!(
        svg,
        r##"<rect width="{width:.0}" height="{height:.0}" fill="#ffffff"/>"##
    );
    for or in 0..episode.num_ors {
        let y = TOP + or as f64 * LANE_PX;
        let _ = writeln!(
            svg,
            r##"<g class="lane" data-or="{or}"><rect x="{LEFT}" y="{y}" width="{:.1}" height="{LANE_PX}" fill="{}"/><text x="6" y="{:.1}">OR {}</text></g>"##,
            end as f64 * SLOT_PX,
            if or % 2 == 0 { "#f4f4f4" } else { "#fafafa" },
            y + LANE_PX / 2.0 + 3.5,
            or + 1,
        );
    }
    let axis_y = TOP + episode.num_ors as f64 * LANE_PX;
    let mut tick = 0;
    while tick <= end {
        let _ = writeln!(
            svg,
            r##"<line x1="{0:.1}" y1="{axis_y}" x2="{0:.1}" y2="{1}" stroke="#999999"/><text x="{0:.1}" y="{2}" text-anchor="middle">{tick}</text>"##,
            x(tick),
            axis_y + 4.0,
            axis_y + 16.0,
        );
        tick += 10;
    }
    for (p, o) in &cases {
        let class = config.class(p.class_id);
        let y = TOP + o.or as f64 * LANE_PX + (LANE_PX - BAR_PX) / 2.0;
        let body = o.start + o.setup;
        if o.setup > 0 {
            let _ = writeln!(
                svg,
                r##"<rect class="setup" x="{:.1}" y="{y:.1}" width="{:.1}" height="{BAR_PX}" fill="url(#setup-hatch)" stroke="#555555" stroke-width="0.5"/>"##,
                x(o.start),
                o.setup as f64 * SLOT_PX,
            );
        }
        let _ = writeln!(
            svg,
            r##"<rect class="case" data-patient="{}" x="{:.1}" y="{y:.1}" width="{:.1}" height="{BAR_PX}" fill="{}" stroke="#222222" stroke-width="0.5"><title>patient {} class {} ({}) start {} finish {}</title></rect>"##,
            p.id,
            x(body),
            (o.finish - body) as f64 * SLOT_PX,
            fill(class.category),
            p.id,
            p.class_id,
            class.category,
            o.start,
            o.finish,
        );
        if o.finish - body >= 3 {
            let _ = writeln!(
                svg,
                r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#ffffff">{}</text>"##,
                x(body) + (o.finish - body) as f64 * SLOT_PX / 2.0,
                y + BAR_PX / 2.0 + 3.5,
                p.class_id,
            );
        }
    }
    if let Some(e) = episode.emergency_slot {
        let _ = writeln!(
            svg,
            r##"<line class="emergency" x1="{0:.1}" y1="{TOP}" x2="{0:.1}" y2="{axis_y}" stroke="#e45756" stroke-width="1.5" stroke-dasharray="4 3"/>"##,
            x(e)
        );
    }
    let _ = writeln!(
        svg,
        r##"<line class="horizon" x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{axis_y}" stroke="#000000" stroke-width="2"/>"##,
        x(horizon),
        TOP - 8.0
    );
    svg.push_str("</svg>\n");

    let mut timeline = String::from("# orsched timeline v1\n");
    let _ = writeln!(
        timeline,
        "# seed={} horizon={} ors={} emergency_slot={}",
        episode.seed,
        horizon,
        episode.num_ors,
        episode.emergency_slot.map_or("-".into(), |s| s.to_string())
    );
    timeline.push_str("or patient class category start setup_end finish\n");
    for (p, o) in &cases {
        let _ = writeln!(
            timeline,
            "{} {} {} {} {} {} {}",
            o.or,
            p.id,
            p.class_id,
            config.class(p.class_id).category,
            o.start,
            o.start + o.setup,
            o.finish
        );
    }
    Gantt { svg, timeline }
}
