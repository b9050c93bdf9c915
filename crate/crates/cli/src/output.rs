//! Output formatting: JSON with 17 significant digits, CSV metrics and
//! 6-digit human tables.

use std::io;

use mdat_core::numkernel::format_g;
use mdat_core::train::EpochReport;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// Significant digits of numbers in JSON and CSV files.
pub const FILE_DIGITS: usize = 17;
/// Significant digits of numbers in tables printed for people.
pub const TABLE_DIGITS: usize = 6;

/// Pretty JSON whose floats are rendered by [`format_g`].
struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(format_g(value, FILE_DIGITS).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty-printed JSON with a trailing newline. Non-finite floats become
/// `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format_g(x, FILE_DIGITS)).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "epoch,domain,accuracy,jc,jd,dev_accuracy,discrepancy";

/// One row per epoch per domain plus an `average` row. Losses and dev
/// accuracy are reported on the average row only.
pub fn metrics_csv(reports: &[EpochReport], domains: &[String]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        for (i, name) in domains.iter().enumerate() {
            let acc = r.accuracy.as_ref().map(|a| a[i]);
            let disc = r.discrepancy.as_ref().map(|d| d[i]);
            out.push_str(&format!("{},{},{},,,,{}\n", r.epoch, name, cell(acc), cell(disc)));
        }
        let disc_mean = r
            .discrepancy
            .as_ref()
            .map(|d| d.iter().sum::<f64>() / d.len().max(1) as f64);
        out.push_str(&format!(
            "{},average,{},{},{},{},{}\n",
            r.epoch,
            cell(r.average_accuracy),
            cell(r.jc),
            cell(r.jd),
            cell(r.dev_accuracy),
            cell(disc_mean)
        ));
    }
    out
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (c, v) in r.iter().enumerate().take(cols) {
            width[c] = width[c].max(v.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (c, v) in cells.iter().enumerate() {
            if c == 0 {
                s.push_str(&format!("{v:<w$}", w = width[0]));
            } else {
                s.push_str(&format!("  {v:>w$}", w = width[c]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn num6(x: f64) -> String {
    format_g(x, TABLE_DIGITS)
}
