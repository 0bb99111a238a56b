//! Loading and validation of time-series matrices, subject manifests and
//! ROI-to-network atlases.
//!
//! All inputs are UTF-8 delimited text. Comma is the default delimiter; a
//! file whose first line contains tabs but no commas is read as tab-separated.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued signal matrix, `T` timepoints by `R` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMatrix {
    channel_names: Vec<String>,
    data: Array2<f64>,
}

impl TimeSeriesMatrix {
    pub fn new(channel_names: Vec<String>, data: Array2<f64>) -> Result<Self> {
        let (t, r) = data.dim();
        if t < 2 || r < 2 {
            return Err(Error::Validation(format!(
                "time series must have at least 2 timepoints and 2 channels, got {t}x{r}"
            )));
        }
        if channel_names.len() != r {
            return Err(Error::Validation(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                r
            )));
        }
        let mut seen = HashSet::new();
        for name in &channel_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate channel name {name:?}")));
            }
        }
        if let Some(((ti, ci), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {v} at timepoint {ti}, channel {:?}",
                channel_names[ci]
            )));
        }
        Ok(Self { channel_names, data })
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// `[T x R]` view of the signals.
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn n_timepoints(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel(&self, index: usize) -> ArrayView1<'_, f64> {
        self.data.column(index)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// Orientation of a time-series file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Header row of channel names, one row per timepoint.
    #[default]
    TimeRows,
    /// One row per channel, leading name column. A header row is optional.
    ChannelRows,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time-rows" => Ok(Layout::TimeRows),
            "channel-rows" => Ok(Layout::ChannelRows),
            other => Err(Error::Validation(format!("unknown layout {other:?}"))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sniff_delimiter(text: &str) -> u8 {
    let first = text.lines().next().unwrap_or("");
    if first.contains('\t') && !first.contains(',') {
        b'\t'
    } else {
        b','
    }
}

/// Rows of trimmed cells, paired with their 1-based line numbers.
fn read_records(path: &Path, text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(sniff_delimiter(text))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cells: Vec<String> = record.iter().map(|c| c.trim().to_string()).collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        rows.push((line, cells));
    }
    Ok(rows)
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {cell:?} as a number"),
    })
}

/// Load a delimited time-series file.
pub fn load_matrix(path: impl AsRef<Path>, layout: Layout) -> Result<TimeSeriesMatrix> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let rows = read_records(path, &text)?;
    match layout {
        Layout::TimeRows => {
            let Some(((_, header), body)) = rows.split_first() else {
                return Err(Error::Validation(format!("{} is empty", path.display())));
            };
            let r = header.len();
            let mut values = Vec::with_capacity(body.len() * r);
            for (line, cells) in body {
                if cells.len() != r {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        message: format!("expected {r} cells, found {}", cells.len()),
                    });
                }
                for cell in cells {
                    values.push(parse_cell(path, *line, cell)?);
                }
            }
            let data = Array2::from_shape_vec((body.len(), r), values)
                .expect("row lengths checked above");
            TimeSeriesMatrix::new(header.clone(), data)
        }
        Layout::ChannelRows => {
            let mut rows = rows.as_slice();
            if let Some((_, first)) = rows.first() {
                let numeric = first.len() > 1 && first[1..].iter().all(|c| c.parse::<f64>().is_ok());
                if !numeric {
                    rows = &rows[1..];
                }
            }
            let Some((_, first)) = rows.first() else {
                return Err(Error::Validation(format!("{} has no channels", path.display())));
            };
            let t = first.len().saturating_sub(1);
            let mut names = Vec::with_capacity(rows.len());
            let mut data = Array2::zeros((t, rows.len()));
            for (j, (line, cells)) in rows.iter().enumerate() {
                if cells.len() != t + 1 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        message: format!("expected {} cells, found {}", t + 1, cells.len()),
                    });
                }
                names.push(cells[0].clone());
                for (i, cell) in cells[1..].iter().enumerate() {
                    data[[i, j]] = parse_cell(path, *line, cell)?;
                }
            }
            TimeSeriesMatrix::new(names, data)
        }
    }
}

/// Write a matrix in time-rows layout. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn write_matrix(path: impl AsRef<Path>, series: &TimeSeriesMatrix) -> Result<()> {
    write_table(path, series.channel_names(), series.data())
}

/// Time-rows writer for any named-column matrix.
pub(crate) fn write_table(path: impl AsRef<Path>, names: &[String], data: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&names.join(","));
    out.push('\n');
    for row in data.axis_iter(Axis(0)) {
        let cells: Vec<String> = row.iter().map(|&v| crate::report::fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    crate::report::write_file(path, out.as_bytes())
}

/// Working-memory group derived from the postoperative span score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WmLabel {
    Low,
    High,
}

impl WmLabel {
    pub const SCORE_RANGE: std::ops::RangeInclusive<u8> = 2..=9;

    /// `low` for scores 2..=5, `high` for 6..=9.
    pub fn from_score(score: u8) -> Result<Self> {
        match score {
            2..=5 => Ok(WmLabel::Low),
            6..=9 => Ok(WmLabel::High),
            other => Err(Error::Validation(format!(
                "span score {other} outside the documented range 2..9"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WmLabel::Low => "low",
            WmLabel::High => "high",
        }
    }

    /// Positive class for classification metrics.
    pub fn is_positive(self) -> bool {
        self == WmLabel::Low
    }
}

impl fmt::Display for WmLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WmLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(WmLabel::Low),
            "high" => Ok(WmLabel::High),
            other => Err(Error::Validation(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub series_path: PathBuf,
    pub series: TimeSeriesMatrix,
    pub ssp_pre: Option<u8>,
    pub ssp_post: u8,
    pub wm_label: WmLabel,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        series_path: impl Into<PathBuf>,
        series: TimeSeriesMatrix,
        ssp_pre: Option<u8>,
        ssp_post: u8,
    ) -> Result<Self> {
        if let Some(pre) = ssp_pre {
            if !WmLabel::SCORE_RANGE.contains(&pre) {
                return Err(Error::Validation(format!(
                    "presurgical span score {pre} outside 2..9"
                )));
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            series_path: series_path.into(),
            series,
            wm_label: WmLabel::from_score(ssp_post)?,
            ssp_pre,
            ssp_post,
        })
    }
}

pub const MANIFEST_HEADER: [&str; 4] = ["subject_id", "series_path", "ssp_pre", "ssp_post"];

fn parse_score(path: &Path, line: usize, cell: &str) -> Result<u8> {
    cell.parse::<u8>().map_err(|_| Error::Validation(format!(
        "{}:{line}: span score {cell:?} is not an integer in 2..9",
        path.display()
    )))
}

/// Load a subject manifest. Series paths are resolved relative to the
/// manifest's directory and read in time-rows layout. Records come back
/// sorted by subject id.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let rows = read_records(path, &text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (line, cells) in rows.iter() {
        if cells.iter().map(String::as_str).eq(MANIFEST_HEADER) {
            continue;
        }
        if cells.len() != MANIFEST_HEADER.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("expected {} cells, found {}", MANIFEST_HEADER.len(), cells.len()),
            });
        }
        let id = cells[0].clone();
        if !ids.insert(id.clone()) {
            return Err(Error::Validation(format!("duplicate subject id {id:?}")));
        }
        let ssp_pre = match cells[2].as_str() {
            "" | "NA" => None,
            s => Some(parse_score(path, *line, s)?),
        };
        let ssp_post = parse_score(path, *line, &cells[3])?;
        WmLabel::from_score(ssp_post)?;
        let series_path = base.join(&cells[1]);
        if !series_path.is_file() {
            return Err(Error::MissingFile(series_path));
        }
        let series = load_matrix(&series_path, Layout::TimeRows)?;
        records.push(SubjectRecord::new(id, series_path, series, ssp_pre, ssp_post)?);
    }
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(records)
}

/// Write a manifest; series paths are written as given.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, PathBuf, Option<u8>, u8)]) -> Result<()> {
    let mut out = MANIFEST_HEADER.join(",");
    out.push('\n');
    for (id, series, pre, post) in rows {
        let pre = pre.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{id},{},{pre},{post}\n", series.display()));
    }
    crate::report::write_file(path.as_ref(), out.as_bytes())
}

/// Resting-state network labels accepted in atlas files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Network {
    #[serde(rename = "DMN")]
    Dmn,
    #[serde(rename = "SN")]
    Sn,
    #[serde(rename = "SMN")]
    Smn,
    #[serde(rename = "LN")]
    Ln,
    #[serde(rename = "other")]
    Other,
}

impl Network {
    /// The four canonical networks analysed individually.
    pub const CANONICAL: [Network; 4] = [Network::Dmn, Network::Sn, Network::Smn, Network::Ln];

    pub fn as_str(self) -> &'static str {
        match self {
            Network::Dmn => "DMN",
            Network::Sn => "SN",
            Network::Smn => "SMN",
            Network::Ln => "LN",
            Network::Other => "other",
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DMN" => Ok(Network::Dmn),
            "SN" => Ok(Network::Sn),
            "SMN" => Ok(Network::Smn),
            "LN" => Ok(Network::Ln),
            "OTHER" => Ok(Network::Other),
            _ => Err(Error::Validation(format!("unknown network label {s:?}"))),
        }
    }
}

/// Channel-to-network assignment, in atlas file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AtlasMapping {
    entries: Vec<(String, Network)>,
}

impl AtlasMapping {
    pub fn new(entries: Vec<(String, Network)>, series: &TimeSeriesMatrix) -> Result<Self> {
        let mut seen = HashSet::new();
        for (channel, _) in &entries {
            if series.channel_index(channel).is_none() {
                return Err(Error::Validation(format!(
                    "atlas channel {channel:?} is not present in the time series"
                )));
            }
            if !seen.insert(channel.as_str()) {
                return Err(Error::Validation(format!("atlas lists channel {channel:?} twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Network)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Member channels of `network`, in atlas order.
    pub fn members(&self, network: Network) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, n)| *n == network)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn member_counts(&self) -> BTreeMap<Network, usize> {
        let mut counts = BTreeMap::new();
        for (_, n) in &self.entries {
            *counts.entry(*n).or_insert(0) += 1;
        }
        counts
    }

    /// Every canonical network needs at least two members for low-order analysis.
    pub fn validate_for_low_order(&self) -> Result<()> {
        for network in Network::CANONICAL {
            let m = self.members(network).len();
            if m < 2 {
                return Err(Error::Validation(format!(
                    "network {network} has {m} member channels; low-order analysis needs at least 2"
                )));
            }
        }
        Ok(())
    }
}

/// Load a two-column `channel_name,network_name` atlas.
pub fn load_atlas(path: impl AsRef<Path>, series: &TimeSeriesMatrix) -> Result<AtlasMapping> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let rows = read_records(path, &text)?;
    let mut entries = Vec::new();
    for (idx, (line, cells)) in rows.iter().enumerate() {
        if cells.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("expected 2 cells, found {}", cells.len()),
            });
        }
        if idx == 0 && cells[0] == "channel_name" && cells[1] == "network_name" {
            continue;
        }
        entries.push((cells[0].clone(), cells[1].parse::<Network>()?));
    }
    AtlasMapping::new(entries, series)
}

pub fn write_atlas(path: impl AsRef<Path>, entries: &[(String, Network)]) -> Result<()> {
    let mut out = String::from("channel_name,network_name\n");
    for (c, n) in entries {
        out.push_str(&format!("{c},{n}\n"));
    }
    crate::report::write_file(path.as_ref(), out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn two_channel(names: [&str; 2]) -> TimeSeriesMatrix {
        TimeSeriesMatrix::new(
            names.iter().map(|s| s.to_string()).collect(),
            Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_time_rows_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "m.csv", "a,b\n1,2\n3,4\n5,6\n");
        let m = load_matrix(&p, Layout::TimeRows).unwrap();
        assert_eq!((m.n_timepoints(), m.n_channels()), (3, 2));
        assert_eq!(m.data()[[2, 1]], 6.0);
    }

    #[test]
    fn channel_rows_and_tabs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "m.tsv", "a\t1\t3\t5\nb\t2\t4\t6\n");
        let m = load_matrix(&p, Layout::ChannelRows).unwrap();
        assert_eq!(m.channel_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(m.data()[[1, 0]], 3.0);
        assert_eq!(m.data()[[2, 1]], 6.0);

        let p = write_tmp(dir.path(), "h.csv", "channel,t0,t1\na,1,2\nb,3,4\n");
        let m = load_matrix(&p, Layout::ChannelRows).unwrap();
        assert_eq!(m.n_timepoints(), 2);
    }

    #[test]
    fn nan_and_inf_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "m.csv", "a,b\n1,NaN\n3,4\n");
        assert!(matches!(load_matrix(&p, Layout::TimeRows), Err(Error::Validation(_))));
        let p = write_tmp(dir.path(), "m2.csv", "a,b\n1,inf\n3,4\n");
        assert!(matches!(load_matrix(&p, Layout::TimeRows), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_cells_duplicates_and_short_series() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "m.csv", "a,b\n1,x\n3,4\n");
        assert!(matches!(load_matrix(&p, Layout::TimeRows), Err(Error::Parse { line: 2, .. })));
        let p = write_tmp(dir.path(), "d.csv", "a,a\n1,2\n3,4\n");
        assert!(matches!(load_matrix(&p, Layout::TimeRows), Err(Error::Validation(_))));
        let p = write_tmp(dir.path(), "s.csv", "a,b\n1,2\n");
        assert!(matches!(load_matrix(&p, Layout::TimeRows), Err(Error::Validation(_))));
        assert!(matches!(
            load_matrix(dir.path().join("absent.csv"), Layout::TimeRows),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn score_boundaries() {
        assert_eq!(WmLabel::from_score(5).unwrap(), WmLabel::Low);
        assert_eq!(WmLabel::from_score(6).unwrap(), WmLabel::High);
        assert_eq!(WmLabel::from_score(2).unwrap(), WmLabel::Low);
        assert_eq!(WmLabel::from_score(9).unwrap(), WmLabel::High);
        assert!(WmLabel::from_score(10).is_err());
        assert!(WmLabel::from_score(1).is_err());
    }

    #[test]
    fn manifest_sorted_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(dir.path(), "s1.csv", "a,b\n1,2\n3,4\n");
        write_tmp(dir.path(), "s2.csv", "a,b\n1,2\n3,5\n");
        let p = write_tmp(
            dir.path(),
            "manifest.csv",
            "subject_id,series_path,ssp_pre,ssp_post\nsub-02,s2.csv,7,6\nsub-01,s1.csv,,5\n",
        );
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs[0].subject_id, "sub-01");
        assert_eq!(recs[0].wm_label, WmLabel::Low);
        assert_eq!(recs[0].ssp_pre, None);
        assert_eq!(recs[1].wm_label, WmLabel::High);

        let p = write_tmp(
            dir.path(),
            "bad.csv",
            "subject_id,series_path,ssp_pre,ssp_post\nsub-01,s1.csv,5,10\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::Validation(_))));
        let p = write_tmp(
            dir.path(),
            "missing.csv",
            "subject_id,series_path,ssp_pre,ssp_post\nsub-01,nope.csv,5,6\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::MissingFile(_))));
    }

    #[test]
    fn atlas_labels_and_membership() {
        let dir = tempfile::tempdir().unwrap();
        let series = two_channel(["roiA", "roiB"]);
        let p = write_tmp(dir.path(), "atlas.csv", "channel_name,network_name\nroiA,DMN\n");
        let atlas = load_atlas(&p, &series).unwrap();
        assert_eq!(atlas.len(), 1);
        assert_eq!(atlas.members(Network::Dmn), vec!["roiA"]);
        assert!(atlas.validate_for_low_order().is_err());

        let p = write_tmp(dir.path(), "fpn.csv", "roiA,FPN\n");
        assert!(matches!(load_atlas(&p, &series), Err(Error::Validation(_))));
        let p = write_tmp(dir.path(), "unmatched.csv", "roiZ,DMN\n");
        assert!(matches!(load_atlas(&p, &series), Err(Error::Validation(_))));
    }
}
