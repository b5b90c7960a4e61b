//! Torso-normalized detection rates, PCK curves and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::spatial::Prediction;

pub const DEFAULT_TORSO_NORM: f64 = 100.0;

/// Joint errors after scaling each sample so its torso measures
/// `torso_norm` pixels, pooled over `joints`. Occluded joints and samples
/// with a zero-length torso are skipped.
pub fn scaled_errors(
    preds: &[Prediction],
    gts: &[Annotation],
    joints: &[usize],
    torso_norm: f64,
) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth samples",
            preds.len(),
            gts.len()
        )));
    }
    let mut out = Vec::new();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let torso = g.torso_length();
        if !(torso > 0.0) {
            log::warn!("sample {i} has a zero-length torso and is excluded");
            continue;
        }
        let s = torso_norm / torso;
        for &j in joints {
            let (Some(gt), Some(pr)) = (g.joints.get(j).copied().flatten(), p.joints.get(j)) else {
                continue;
            };
            out.push((pr[0] - gt[0]).hypot(pr[1] - gt[1]) * s);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no evaluable samples"));
    }
    Ok(out)
}

fn rate_of(errors: &[f64], radius: f64) -> f64 {
    errors.iter().filter(|&&e| e <= radius).count() as f64 / errors.len() as f64
}

/// Fraction of joint predictions within `radius` normalized pixels.
pub fn detection_rate(
    preds: &[Prediction],
    gts: &[Annotation],
    joints: &[usize],
    radius: f64,
    torso_norm: f64,
) -> Result<f64> {
    Ok(rate_of(
        &scaled_errors(preds, gts, joints, torso_norm)?,
        radius,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub label: String,
    pub joints: Vec<usize>,
    pub radii: Vec<f64>,
    pub rate: Vec<f64>,
}

pub fn pck_curve(
    preds: &[Prediction],
    gts: &[Annotation],
    joints: &[usize],
    radii: &[f64],
    torso_norm: f64,
    label: &str,
) -> Result<PckCurve> {
    check_radii(radii)?;
    let errors = scaled_errors(preds, gts, joints, torso_norm)?;
    Ok(PckCurve {
        label: label.to_string(),
        joints: joints.to_vec(),
        radii: radii.to_vec(),
        rate: radii.iter().map(|&r| rate_of(&errors, r)).collect(),
    })
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() || radii.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid(
            "radii must be a nonempty list of finite values",
        ));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("radii must be strictly ascending"));
    }
    Ok(())
}

/// `0..=30` in unit steps.
pub fn default_radii() -> Vec<f64> {
    (0..=30).map(f64::from).collect()
}

/// Parses `start:end:step` (inclusive end).
pub fn parse_radii(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("bad radii {spec:?}, expected start:end:step")))?;
    let [a, b, s] = parts[..] else {
        return Err(Error::invalid(format!(
            "bad radii {spec:?}, expected start:end:step"
        )));
    };
    if !(s > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!("bad radii {spec:?}")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + s * i as f64).collect())
}

fn rate_at(curve: &PckCurve, r: f64) -> f64 {
    let i = curve.radii.partition_point(|&x| x < r);
    if i < curve.radii.len() && curve.radii[i] == r {
        return curve.rate[i];
    }
    let (r0, r1) = (curve.radii[i - 1], curve.radii[i]);
    let t = (r - r0) / (r1 - r0);
    curve.rate[i - 1] + t * (curve.rate[i] - curve.rate[i - 1])
}

/// Trapezoidal mean of the detection rate over `[lo, hi]`.
pub fn mean_precision(curve: &PckCurve, lo: f64, hi: f64) -> Result<f64> {
    check_radii(&curve.radii)?;
    if curve.rate.len() != curve.radii.len() {
        return Err(Error::invalid("curve radii and rates differ in length"));
    }
    if !(hi > lo) {
        return Err(Error::invalid("empty radius interval"));
    }
    let (first, last) = (curve.radii[0], curve.radii[curve.radii.len() - 1]);
    if first > lo || last < hi {
        return Err(Error::invalid(format!(
            "curve covers [{first}, {last}], not [{lo}, {hi}]"
        )));
    }
    let mut xs = vec![lo];
    xs.extend(curve.radii.iter().copied().filter(|&r| r > lo && r < hi));
    xs.push(hi);
    let area: f64 = xs
        .windows(2)
        .map(|w| 0.5 * (rate_at(curve, w[0]) + rate_at(curve, w[1])) * (w[1] - w[0]))
        .sum();
    Ok(area / (hi - lo))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn render_svg(curves: &[PckCurve]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 170.0, 20.0, 50.0);
    let radii = &curves[0].radii;
    let (r0, r1) = (radii[0], radii[radii.len() - 1]);
    let span = if r1 > r0 { r1 - r0 } else { 1.0 };
    let px = |r: f64| left + (r - r0) / span * (w - left - right);
    let py = |v: f64| top + (1.0 - v) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        py(0.0),
        px(r1),
        py(0.0),
        py(0.0)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{:.0}</text>"#,
            left - 6.0,
            py(v) + 4.0,
            v * 100.0
        );
    }
    for i in 0..=6 {
        let r = r0 + span * i as f64 / 6.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            px(r),
            py(0.0) + 16.0,
            (r * 10.0).round() / 10.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">normalized radius (px)</text>"#,
        px(r0 + span / 2.0),
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">detection rate (%)</text>"#,
        py(0.5),
        py(0.5)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .radii
            .iter()
            .zip(&c.rate)
            .map(|(&r, &v)| format!("{:.2},{:.2}", px(r), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            xml_escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn render_csv(curves: &[PckCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["radius".to_string()];
    header.extend(curves.iter().map(|c| c.label.clone()));
    w.write_record(&header)?;
    for (i, r) in curves[0].radii.iter().enumerate() {
        let mut row = vec![r.to_string()];
        row.extend(curves.iter().map(|c| c.rate[i].to_string()));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

/// Writes `<stem>.csv` (radius, one column per curve) and `<stem>.svg`.
/// All curves must share their radii.
pub fn emit_results(curves: &[PckCurve], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let Some(first) = curves.first() else {
        return Err(Error::invalid("no curves to emit"));
    };
    for c in curves {
        if c.radii != first.radii || c.rate.len() != c.radii.len() {
            return Err(Error::invalid(format!(
                "curve {:?} does not share the radius grid",
                c.label
            )));
        }
    }
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    let csv = render_csv(curves)?;
    let svg = render_svg(curves);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

/// Reads a CSV written by [`emit_results`].
pub fn read_results_csv(path: &Path) -> Result<Vec<PckCurve>> {
    let mut r = csv::Reader::from_path(path)?;
    let labels: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut curves: Vec<PckCurve> = labels
        .iter()
        .map(|l| PckCurve {
            label: l.clone(),
            joints: Vec::new(),
            radii: Vec::new(),
            rate: Vec::new(),
        })
        .collect();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if vals.len() != labels.len() + 1 {
            return Err(Error::Format(format!("{}: ragged row", path.display())));
        }
        for (c, v) in curves.iter_mut().zip(&vals[1..]) {
            c.radii.push(vals[0]);
            c.rate.push(*v);
        }
    }
    Ok(curves)
}

/// Plain-text table with left-aligned first column and right-aligned rest.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, v) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(v.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == 0 {
                    format!("{v:<w$}", w = width[i])
                } else {
                    format!("{v:>w$}", w = width[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header.to_vec());
    for r in rows {
        s += &line(r.iter().map(String::as_str).collect());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Point;
    use proptest::prelude::*;

    fn gt(wrist: Point, torso: f64) -> Annotation {
        Annotation {
            joints: [None, None, Some(wrist), None, None, None],
            neck: [0.0, 0.0],
            hip: [0.0, torso],
        }
    }

    fn pred(p: Point) -> Prediction {
        Prediction {
            joints: vec![p; 6],
            low_confidence: vec![false; 6],
        }
    }

    #[test]
    fn perfect_predictions_detect_everything() {
        let gts: Vec<_> = (0..5).map(|i| gt([i as f64, 3.0], 80.0)).collect();
        let preds: Vec<_> = gts.iter().map(|g| pred(g.joints[2].unwrap())).collect();
        for r in [0.0, 1.0, 30.0] {
            assert_eq!(detection_rate(&preds, &gts, &[2], r, 100.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn three_sample_fixture() {
        // Torso 100 px, so raw and scaled errors coincide: 2, 8, 30.
        let gts = vec![gt([10.0, 10.0], 100.0); 3];
        let preds = vec![pred([12.0, 10.0]), pred([10.0, 18.0]), pred([28.0, 34.0])];
        assert_eq!(
            detection_rate(&preds, &gts, &[2], 10.0, 100.0).unwrap(),
            2.0 / 3.0
        );
    }

    #[test]
    fn long_torso_is_scaled_down() {
        let gts = vec![gt([50.0, 50.0], 200.0)];
        let preds = vec![pred([50.0, 66.0])];
        assert_eq!(scaled_errors(&preds, &gts, &[2], 100.0).unwrap(), vec![8.0]);
        assert_eq!(
            detection_rate(&preds, &gts, &[2], 10.0, 100.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn zero_torso_excluded() {
        let gts = vec![gt([0.0, 0.0], 0.0), gt([0.0, 0.0], 50.0)];
        let preds = vec![pred([100.0, 0.0]), pred([0.0, 0.0])];
        assert_eq!(detection_rate(&preds, &gts, &[2], 1.0, 100.0).unwrap(), 1.0);
        assert!(detection_rate(&preds[..1], &gts[..1], &[2], 1.0, 100.0).is_err());
    }

    #[test]
    fn curve_matches_independent_calls() {
        let gts: Vec<_> = (0..7)
            .map(|i| gt([5.0 * i as f64, 0.0], 60.0 + i as f64))
            .collect();
        let preds: Vec<_> = (0..7)
            .map(|i| pred([5.0 * i as f64 + i as f64 * 1.7, 2.0]))
            .collect();
        let radii = default_radii();
        let c = pck_curve(&preds, &gts, &[2], &radii, 100.0, "x").unwrap();
        for (r, v) in radii.iter().zip(&c.rate) {
            assert_eq!(*v, detection_rate(&preds, &gts, &[2], *r, 100.0).unwrap());
        }
        let far = pck_curve(&preds, &gts, &[2], &[1e6], 100.0, "x").unwrap();
        assert_eq!(far.rate, vec![1.0]);
        assert!(pck_curve(&preds, &gts, &[2], &[3.0, 1.0], 100.0, "x").is_err());
    }

    fn curve(radii: Vec<f64>, rate: Vec<f64>) -> PckCurve {
        PckCurve {
            label: "c".into(),
            joints: vec![],
            radii,
            rate,
        }
    }

    #[test]
    fn mean_precision_trapezoid() {
        let radii = default_radii();
        let flat = curve(radii.clone(), vec![0.5; radii.len()]);
        assert!((mean_precision(&flat, 0.0, 20.0).unwrap() - 0.5).abs() < 1e-15);
        let ramp = curve(
            radii.clone(),
            radii.iter().map(|r| (r / 20.0).min(1.0)).collect(),
        );
        assert!((mean_precision(&ramp, 0.0, 20.0).unwrap() - 0.5).abs() < 1e-15);
        // (0.2+0.6)/2*5 + (0.6+1.0)/2*15 = 14, over a width of 20.
        let three = curve(vec![0.0, 5.0, 20.0], vec![0.2, 0.6, 1.0]);
        assert!((mean_precision(&three, 0.0, 20.0).unwrap() - 0.7).abs() < 1e-15);
        assert!(mean_precision(&curve(vec![0.0, 10.0], vec![0.1, 0.2]), 0.0, 20.0).is_err());
    }

    #[test]
    fn radii_spec() {
        assert_eq!(parse_radii("0:30:1").unwrap(), default_radii());
        assert_eq!(parse_radii("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_radii("0:30").is_err());
        assert!(parse_radii("5:1:1").is_err());
    }

    #[test]
    fn emit_round_trip_and_structure() {
        let dir = tempfile::tempdir().unwrap();
        let radii = default_radii();
        let a = curve(
            radii.clone(),
            radii.iter().map(|r| (r / 31.0).sqrt()).collect(),
        );
        let mut b = curve(
            radii.clone(),
            radii.iter().map(|r| (r / 30.0) * 0.3).collect(),
        );
        b.label = "flow <mag>".into();
        let (csv, svg) = emit_results(&[a.clone(), b.clone()], &dir.path().join("pck")).unwrap();
        let back = read_results_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].rate, a.rate);
        assert_eq!(back[1].rate, b.rate);
        assert_eq!(back[1].label, b.label);
        let text = fs::read_to_string(svg).unwrap();
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains("flow &lt;mag&gt;"));
    }

    #[test]
    fn empty_emit_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_results(&[], &dir.path().join("pck")).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn table_aligns() {
        let t = format_table(
            &["delta", "mAP"],
            &[
                vec!["1".into(), "0.51".into()],
                vec!["10".into(), "0.4".into()],
            ],
        );
        assert_eq!(t, "delta   mAP\n1      0.51\n10      0.4\n");
    }

    proptest! {
        #[test]
        fn scale_invariant_monotone_permutation(
            errs in proptest::collection::vec((0.0f64..40.0, 0.0f64..6.28, 20.0f64..150.0), 1..12),
            k in 0.25f64..4.0,
        ) {
            let gts: Vec<_> = errs.iter().map(|&(_, _, t)| gt([30.0, 40.0], t)).collect();
            let preds: Vec<_> = errs.iter().map(|&(e, a, _)| pred([30.0 + e * a.cos(), 40.0 + e * a.sin()])).collect();
            let radii = default_radii();
            let c = pck_curve(&preds, &gts, &[2], &radii, 100.0, "p").unwrap();
            prop_assert!(c.rate.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.rate.iter().all(|v| (0.0..=1.0).contains(v)));
            let sg: Vec<_> = gts.iter().map(|g| g.scale(k, k)).collect();
            let sp: Vec<_> = preds.iter().map(|p| pred([p.joints[2][0] * k, p.joints[2][1] * k])).collect();
            let e0 = scaled_errors(&preds, &gts, &[2], 100.0).unwrap();
            let e1 = scaled_errors(&sp, &sg, &[2], 100.0).unwrap();
            for (a, b) in e0.iter().zip(&e1) {
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
            let mut rp = preds.clone();
            let mut rg = gts.clone();
            rp.reverse();
            rg.reverse();
            let rc = pck_curve(&rp, &rg, &[2], &radii, 100.0, "p").unwrap();
            prop_assert_eq!(rc.rate, c.rate);
        }
    }
}
