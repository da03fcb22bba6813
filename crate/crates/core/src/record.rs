//! Per-client, per-cycle run records and their on-disk formats.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ClientId, Result, SabreError};

/// One client's state at the end of one local cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub client: ClientId,
    pub cycle: u64,
    pub tick: u64,
    pub compromised: bool,
    pub social_mean: Vec<f64>,
    pub social_var: Vec<f64>,
    pub social_trace: f64,
    pub local_mean: Vec<f64>,
    pub local_var: Vec<f64>,
    pub local_trace: f64,
    /// `||social mean - theta*||^2`.
    pub sq_error: f64,
    /// Senders aggregated over this cycle, self included.
    pub neighbors: Vec<ClientId>,
    /// Senders whose beliefs were used.
    pub confidence_set: Vec<ClientId>,
    /// Social-mean coordinates replaced by the local mean.
    pub overwritten: Vec<usize>,
    pub floor_events: u32,
    pub events: Vec<String>,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub dim: usize,
    pub rows: Vec<RecordRow>,
}

impl RunRecord {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new() }
    }

    pub fn rows_for(&self, client: ClientId) -> impl Iterator<Item = &RecordRow> + '_ {
        self.rows.iter().filter(move |r| r.client == client)
    }

    pub fn last_row(&self, client: ClientId) -> Option<&RecordRow> {
        self.rows.iter().rev().find(|r| r.client == client)
    }

    /// Distinct clients in id order.
    pub fn clients(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> = self.rows.iter().map(|r| r.client).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn benign_clients(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> = self.rows.iter().filter(|r| !r.compromised).map(|r| r.client).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Ordering required of every record: by (tick, client, cycle), no duplicates.
    pub fn is_ordered(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| (w[0].tick, w[0].client, w[0].cycle) < (w[1].tick, w[1].client, w[1].cycle))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header(self.dim)).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(encode_row(r)).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let head = rd.headers().map_err(csv_err)?.clone();
        let dim = head.iter().filter(|h| h.starts_with("social_mean_")).count();
        if head.iter().collect::<Vec<_>>() != header(dim) {
            return Err(SabreError::Analysis("record header does not match the expected layout".into()));
        }
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            rows.push(decode_row(&rec, dim).map_err(|e| {
                SabreError::Analysis(format!("record row {}: {e}", line + 1))
            })?);
        }
        Ok(Self { dim, rows })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self).map_err(|e| SabreError::Io(e.into()))
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        serde_json::from_reader(input).map_err(|e| SabreError::Analysis(format!("record json: {e}")))
    }
}

fn csv_err(e: csv::Error) -> SabreError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SabreError::Io(io),
        other => SabreError::Analysis(format!("csv: {other:?}")),
    }
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["client", "cycle", "tick", "compromised"].map(String::from).to_vec();
    let vec_cols = |prefix: &'static str| (0..dim).map(move |k| format!("{prefix}_{k}"));
    h.extend(vec_cols("social_mean"));
    h.extend(vec_cols("social_var"));
    h.push("social_trace".into());
    h.extend(vec_cols("local_mean"));
    h.extend(vec_cols("local_var"));
    h.push("local_trace".into());
    for c in [
        "sq_error",
        "neighbors",
        "confidence_set",
        "overwritten",
        "floor_events",
        "events",
        "terminated",
    ] {
        h.push(c.into());
    }
    h
}

/// Seventeen significant digits: enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn encode_row(r: &RecordRow) -> Vec<String> {
    let mut out = vec![
        r.client.to_string(),
        r.cycle.to_string(),
        r.tick.to_string(),
        (r.compromised as u8).to_string(),
    ];
    out.extend(r.social_mean.iter().map(|&v| fmt_f64(v)));
    out.extend(r.social_var.iter().map(|&v| fmt_f64(v)));
    out.push(fmt_f64(r.social_trace));
    out.extend(r.local_mean.iter().map(|&v| fmt_f64(v)));
    out.extend(r.local_var.iter().map(|&v| fmt_f64(v)));
    out.push(fmt_f64(r.local_trace));
    out.push(fmt_f64(r.sq_error));
    out.push(join(&r.neighbors));
    out.push(join(&r.confidence_set));
    out.push(join(&r.overwritten));
    out.push(r.floor_events.to_string());
    out.push(r.events.join(";"));
    out.push((r.terminated as u8).to_string());
    out
}

struct Fields<'a> {
    it: csv::StringRecordIter<'a>,
}

impl<'a> Fields<'a> {
    fn raw(&mut self, what: &str) -> std::result::Result<&'a str, String> {
        self.it.next().ok_or_else(|| format!("missing {what}"))
    }

    fn num<T: std::str::FromStr>(&mut self, what: &str) -> std::result::Result<T, String> {
        let s = self.raw(what)?;
        s.parse().map_err(|_| format!("bad {what}: {s:?}"))
    }

    fn flag(&mut self, what: &str) -> std::result::Result<bool, String> {
        match self.raw(what)? {
            "0" => Ok(false),
            "1" => Ok(true),
            s => Err(format!("bad {what}: {s:?}")),
        }
    }

    fn vector(&mut self, dim: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        (0..dim).map(|_| self.num(what)).collect()
    }

    fn list<T: std::str::FromStr>(&mut self, what: &str) -> std::result::Result<Vec<T>, String> {
        let s = self.raw(what)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(';')
            .map(|p| p.parse().map_err(|_| format!("bad {what}: {s:?}")))
            .collect()
    }
}

fn decode_row(rec: &csv::StringRecord, dim: usize) -> std::result::Result<RecordRow, String> {
    let mut f = Fields { it: rec.iter() };
    let ids = |v: Vec<u32>| v.into_iter().map(ClientId).collect::<Vec<_>>();
    Ok(RecordRow {
        client: ClientId(f.num("client")?),
        cycle: f.num("cycle")?,
        tick: f.num("tick")?,
        compromised: f.flag("compromised")?,
        social_mean: f.vector(dim, "social_mean")?,
        social_var: f.vector(dim, "social_var")?,
        social_trace: f.num("social_trace")?,
        local_mean: f.vector(dim, "local_mean")?,
        local_var: f.vector(dim, "local_var")?,
        local_trace: f.num("local_trace")?,
        sq_error: f.num("sq_error")?,
        neighbors: ids(f.list("neighbors")?),
        confidence_set: ids(f.list("confidence_set")?),
        overwritten: f.list("overwritten")?,
        floor_events: f.num("floor_events")?,
        events: f.list("events")?,
        terminated: f.flag("terminated")?,
    })
}
