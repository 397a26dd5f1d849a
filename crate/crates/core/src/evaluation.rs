//! Agreement statistics between predicted and reference morphometry.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image_io::SegMasks;
use crate::morphometry::MorphoReport;
use crate::postprocess::{LabelMap, RegionClass};
use crate::synth::Stratum;

/// Which standard deviation the agreement limits use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdConvention {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

fn mean_sd(values: &[f64], convention: SdConvention) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match convention {
        SdConvention::Population => n,
        SdConvention::Sample => (n - 1.0).max(1.0),
    };
    (mean, (ss / denom).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub n: usize,
    pub mean_diff: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `(mean, difference)` per pair.
    pub pairs: Vec<(f64, f64)>,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    bland_altman_with(a, b, SdConvention::Population)
}

pub fn bland_altman_with(a: &[f64], b: &[f64], convention: SdConvention) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} measurements", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("bland-altman needs at least two pairs".into()));
    }
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).map(|(&x, &y)| ((x + y) / 2.0, x - y)).collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mean_diff, sd) = mean_sd(&diffs, convention);
    Ok(BlandAltman {
        n: a.len(),
        mean_diff,
        sd,
        ci_low: mean_diff - 1.96 * sd,
        ci_high: mean_diff + 1.96 * sd,
        pairs,
    })
}

impl BlandAltman {
    pub const CSV_HEADER: &'static str = "n,mean_diff,sd,ci_low,ci_high";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.n, self.mean_diff, self.sd, self.ci_low, self.ci_high)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }

    /// Scatter of differences against means with the mean and limit lines.
    pub fn svg(&self, title: &str, unit: &str) -> String {
        let points: Vec<(f64, f64)> = self.pairs.clone();
        let mut plot = Plot::new(title, &format!("mean ({unit})"), &format!("difference ({unit})"));
        plot.fit(&points);
        plot.fit(&[(points[0].0, self.ci_low), (points[0].0, self.ci_high)]);
        let mut svg = plot.begin();
        for &(y, dash) in &[(self.mean_diff, ""), (self.ci_low, "4 3"), (self.ci_high, "4 3")] {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black" stroke-dasharray="{dash}"/>"#,
                plot.sx(plot.x0),
                plot.sx(plot.x1),
                y = plot.sy(y),
            );
        }
        for &(x, y) in &points {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, plot.sx(x), plot.sy(y));
        }
        let _ = writeln!(svg, "<!-- data\n{}\n{}\nmean,diff", Self::CSV_HEADER, self.csv_row());
        for (m, d) in &points {
            let _ = writeln!(svg, "{m},{d}");
        }
        svg.push_str("-->\n</svg>\n");
        svg
    }
}

fn class_grid_of_map(map: &LabelMap) -> Grid<u8> {
    map.labels().map(|&l| match map.class_of(l) {
        Some(RegionClass::Cell) => 0,
        Some(RegionClass::Gutta) => 1,
        None => 2,
    })
}

/// Three-class (cell / gutta / other) pixel agreement inside the reference
/// roi, in percent.
pub fn pixel_accuracy(pred: &LabelMap, reference: &SegMasks) -> Result<f64> {
    if pred.width() != reference.width() || pred.height() != reference.height() {
        return Err(Error::DimensionMismatch("prediction and reference differ in size".into()));
    }
    let classes = class_grid_of_map(pred);
    let roi = reference.roi;
    let mut agree = 0usize;
    for y in roi.y..roi.y + roi.height {
        for x in roi.x..roi.x + roi.width {
            let truth = if *reference.cells.get(x, y) {
                0
            } else if *reference.guttae.get(x, y) {
                1
            } else {
                2
            };
            agree += (*classes.get(x, y) == truth) as usize;
        }
    }
    Ok(agree as f64 / roi.area() as f64 * 100.0)
}

/// Pixel accuracy averaged per image, then over images.
pub fn mean_pixel_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a LabelMap, &'a SegMasks)>) -> Result<f64> {
    let scores = pairs.into_iter().map(|(p, r)| pixel_accuracy(p, r)).collect::<Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Err(Error::Empty("no images to score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean absolute error of the four cell parameters at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMae {
    pub epoch: usize,
    pub mae_mca: f64,
    pub mae_cv: f64,
    pub mae_cd: f64,
    pub mae_hex: f64,
}

/// Per-image absolute errors averaged over images. A parameter the
/// prediction cannot report (no interior cells) counts as 0; images whose
/// reference lacks the parameter are skipped for it.
pub fn morphometric_mae(epoch: usize, pred: &[MorphoReport], reference: &[MorphoReport]) -> Result<EpochMae> {
    if pred.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} references", pred.len(), reference.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let mae = |get: fn(&MorphoReport) -> Option<f64>| {
        let errs: Vec<f64> = pred
            .iter()
            .zip(reference)
            .filter_map(|(p, r)| get(r).map(|rv| (get(p).unwrap_or(0.0) - rv).abs()))
            .collect();
        if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    };
    Ok(EpochMae {
        epoch,
        mae_mca: mae(|r| r.mca),
        mae_cv: mae(|r| r.cv_pct),
        mae_cd: mae(|r| Some(r.cd)),
        mae_hex: mae(|r| r.hex_pct),
    })
}

/// Morphometric MAE of every checkpoint on a test set. `analyze` turns a
/// checkpoint and test index into the predicted report.
pub fn epoch_mae_curves<M>(
    checkpoints: &[(usize, M)],
    reference: &[MorphoReport],
    mut analyze: impl FnMut(&M, usize) -> Result<MorphoReport>,
) -> Result<Vec<EpochMae>> {
    if reference.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    checkpoints
        .iter()
        .map(|(epoch, model)| {
            let preds = (0..reference.len()).map(|i| analyze(model, i)).collect::<Result<Vec<_>>>()?;
            morphometric_mae(*epoch, &preds, reference)
        })
        .collect()
}

pub const EPOCHS_CSV_HEADER: &str = "epoch,mae_mca,mae_cv,mae_cd,mae_hex";

pub fn write_epochs_csv(rows: &[EpochMae], mut out: impl Write) -> Result<()> {
    writeln!(out, "{EPOCHS_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.mae_mca, r.mae_cv, r.mae_cd, r.mae_hex)?;
    }
    Ok(())
}

/// One line plot per parameter (MCA, CV, CD, HEX), each with a line per
/// named curve. Returns `(file stem, svg)` pairs.
pub fn epoch_svgs(curves: &[(&str, &[EpochMae])]) -> Vec<(String, String)> {
    let params: [(&str, &str, fn(&EpochMae) -> f64); 4] = [
        ("mae_mca", "MCA (um2)", |r| r.mae_mca),
        ("mae_cv", "CV (%)", |r| r.mae_cv),
        ("mae_cd", "CD (cells/mm2)", |r| r.mae_cd),
        ("mae_hex", "HEX (%)", |r| r.mae_hex),
    ];
    let colors = ["crimson", "steelblue", "darkgreen", "darkorange"];
    params
        .iter()
        .map(|(stem, label, get)| {
            let series: Vec<(&str, Vec<(f64, f64)>)> = curves
                .iter()
                .map(|(name, rows)| (*name, rows.iter().map(|r| (r.epoch as f64, get(r))).collect()))
                .collect();
            let mut plot = Plot::new(&format!("MAE of {label}"), "epoch", label);
            for (_, pts) in &series {
                plot.fit(pts);
            }
            plot.y0 = plot.y0.min(0.0);
            let mut svg = plot.begin();
            for (k, (name, pts)) in series.iter().enumerate() {
                let color = colors[k % colors.len()];
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", plot.sx(x), plot.sy(y))).collect();
                let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" fill="{color}" font-size="12">{name}</text>"#,
                    plot.left + 10.0,
                    plot.top + 16.0 * (k + 1) as f64
                );
            }
            let _ = writeln!(svg, "<!-- data\ncurve,epoch,value");
            for (name, pts) in &series {
                for (x, y) in pts {
                    let _ = writeln!(svg, "{name},{x},{y}");
                }
            }
            svg.push_str("-->\n</svg>\n");
            (stem.to_string(), svg)
        })
        .collect()
}

struct Plot {
    title: String,
    xlabel: String,
    ylabel: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Plot {
    fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Plot {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
            left: 70.0,
            top: 40.0,
            width: 480.0,
            height: 300.0,
        }
    }

    fn fit(&mut self, pts: &[(f64, f64)]) {
        for &(x, y) in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            self.x0 = self.x0.min(x);
            self.x1 = self.x1.max(x);
            self.y0 = self.y0.min(y);
            self.y1 = self.y1.max(y);
        }
    }

    fn ranges(&self) -> (f64, f64, f64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (self.x0, self.x1, self.y0, self.y1);
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = (y1 - y0) * 0.05;
        (x0, x1, y0 - pad, y1 + pad)
    }

    fn sx(&self, x: f64) -> f64 {
        let (x0, x1, _, _) = self.ranges();
        self.left + (x - x0) / (x1 - x0) * self.width
    }

    fn sy(&self, y: f64) -> f64 {
        let (_, _, y0, y1) = self.ranges();
        self.top + self.height - (y - y0) / (y1 - y0) * self.height
    }

    fn begin(&self) -> String {
        let (x0, x1, y0, y1) = self.ranges();
        let (w, h) = (self.left + self.width + 30.0, self.top + self.height + 50.0);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, self.left + self.width / 2.0, self.title);
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
            self.left, self.top, self.width, self.height
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
                self.sx(fx),
                self.top + self.height + 16.0,
                tick(fx)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
                self.left - 6.0,
                self.sy(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            self.left + self.width / 2.0,
            self.top + self.height + 38.0,
            self.xlabel
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"#,
            self.top + self.height / 2.0,
            self.top + self.height / 2.0,
            self.ylabel
        );
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// GAR% differences (prediction minus reference) summarized per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarRow {
    pub stratum: Stratum,
    pub n: usize,
    pub mean_diff: f64,
    pub sd: f64,
}

/// One row per stratum that occurs in `strata`, in severity order.
pub fn gar_agreement(pred: &[MorphoReport], reference: &[MorphoReport], strata: &[Stratum], convention: SdConvention) -> Result<Vec<GarRow>> {
    if pred.len() != reference.len() || pred.len() != strata.len() {
        return Err(Error::DimensionMismatch("reports and strata differ in length".into()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no reports to compare".into()));
    }
    Ok(Stratum::ALL
        .iter()
        .filter_map(|&s| {
            let diffs: Vec<f64> = (0..pred.len())
                .filter(|&i| strata[i] == s)
                .map(|i| pred[i].gar_pct - reference[i].gar_pct)
                .collect();
            if diffs.is_empty() {
                return None;
            }
            let (mean_diff, sd) = mean_sd(&diffs, convention);
            Some(GarRow { stratum: s, n: diffs.len(), mean_diff, sd })
        })
        .collect())
}

pub fn write_gar_csv(rows: &[GarRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "stratum,n,mean_diff,sd")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.stratum.name(), r.n, r.mean_diff, r.sd)?;
    }
    Ok(())
}
