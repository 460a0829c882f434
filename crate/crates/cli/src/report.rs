//! `report`: metric table and image grid over run directories.

use std::collections::BTreeSet;
use std::path::Path;

use xview::metrics::MetricReport;
use xview::Image;

use crate::{read_pngs, run_method, snapshot, CliError, ReportArgs, Result};

struct Run {
    method: String,
    metrics: MetricReport,
    fake: Vec<(String, Image)>,
}

fn load_run(dir: &Path) -> Result<Run> {
    let metrics_path = dir.join("metrics.csv");
    let stored = if metrics_path.exists() {
        MetricReport::load_csv(&metrics_path)?.into_iter().next()
    } else {
        log::warn!("{} has no metrics.csv; its table column is left blank", dir.display());
        None
    };
    let method = stored
        .as_ref()
        .map(|r| r.method.clone())
        .or_else(|| run_method(dir))
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "unknown".into());
    Ok(Run {
        metrics: stored.unwrap_or_else(|| MetricReport::empty(&method)),
        method,
        fake: read_pngs(&dir.join("fake"))?,
    })
}

/// Tiles `rows x cols` equally sized cells into one image.
pub fn tile(cells: &[Vec<Image>]) -> Result<Image> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| CliError::Usage("nothing to tile".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = cells[0].len();
    let mut out = Image::filled(3, h * cells.len(), w * cols, 1.0);
    for (r, row) in cells.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let img = if img.height() != h || img.width() != w {
                img.resize_bilinear(h, w)
            } else {
                img.clone()
            };
            for y in 0..h {
                for x in 0..w {
                    out.set_rgb(r * h + y, c * w + x, img.rgb(y, x));
                }
            }
        }
    }
    Ok(out)
}

pub fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut runs: Vec<Run> = a.runs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    runs.sort_by(|x, y| x.method.cmp(&y.method));
    let first_dir = &a.runs[0];
    let inputs = read_pngs(&first_dir.join("input"))?;
    let reals = read_pngs(&first_dir.join("real"))?;

    let mut common: BTreeSet<&String> = inputs.iter().map(|(n, _)| n).collect();
    common.retain(|id| reals.iter().any(|(n, _)| n == *id));
    for r in &runs {
        common.retain(|id| r.fake.iter().any(|(n, _)| n == *id));
    }
    let ids: Vec<&String> = common.into_iter().take(a.rows.max(1)).collect();
    if ids.is_empty() {
        return Err(xview::Error::Config("the runs share no sample ids".into()).into());
    }
    let find = |set: &[(String, Image)], id: &str| set.iter().find(|(n, _)| n == id).map(|(_, i)| i.clone());
    let mut cells = Vec::new();
    for id in &ids {
        let mut row = vec![find(&inputs, id).expect("common id"), find(&reals, id).expect("common id")];
        for r in &runs {
            row.push(find(&r.fake, id).expect("common id"));
        }
        cells.push(row);
    }
    let grid = tile(&cells)?;

    std::fs::create_dir_all(&a.out).map_err(xview::Error::from)?;
    grid.save_png(&a.out.join("grid.png"))?;
    let mut legend = String::from("columns: input | ground truth");
    for r in &runs {
        legend.push_str(" | ");
        legend.push_str(&r.method);
    }
    legend.push_str("\nrows: ");
    legend.push_str(&ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "));
    legend.push('\n');
    std::fs::write(a.out.join("grid.txt"), &legend).map_err(xview::Error::from)?;

    let reports: Vec<MetricReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    let table = MetricReport::table(&reports);
    std::fs::write(a.out.join("table.txt"), &table).map_err(xview::Error::from)?;
    std::fs::write(a.out.join("metrics.csv"), MetricReport::many_to_csv(&reports)?).map_err(xview::Error::from)?;
    snapshot(&a.out, "report", a)?;
    print!("{legend}{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_row_major() {
        let a = Image::filled(3, 2, 2, 0.0);
        let b = Image::filled(3, 2, 2, 0.5);
        let g = tile(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!(g.dims(), (3, 4, 4));
        assert_eq!(g.rgb(0, 0), [0.0; 3]);
        assert_eq!(g.rgb(0, 3), [0.5; 3]);
        assert_eq!(g.rgb(3, 0), [0.5; 3]);
        assert_eq!(g.rgb(3, 3), [0.0; 3]);
    }
}
