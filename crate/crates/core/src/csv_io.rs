//! CSV ingestion and export of unit records.
//!
//! Header row required. Reserved columns: `id`, `cluster`, `y`, `pi_r`, `z`,
//! plus the optional nuisance columns `pib` and `mhat`. Columns prefixed `x_`
//! map to x, `d_` to d, in header order. An empty cell is an absent value.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::UnitRecord;
use crate::error::{Error, Result};

/// Parsed file: records plus optional user-supplied nuisance values.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    pub records: Vec<UnitRecord>,
    pub pib: Option<Vec<Option<f64>>>,
    pub mhat: Option<Vec<Option<f64>>>,
}

struct Columns {
    id: usize,
    cluster: Option<usize>,
    y: Option<usize>,
    pi_r: Option<usize>,
    z: Option<usize>,
    pib: Option<usize>,
    mhat: Option<usize>,
    x: Vec<usize>,
    d: Vec<usize>,
}

fn columns(header: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let prefixed = |p: &str| header.iter().enumerate().filter(|(_, h)| h.trim().starts_with(p)).map(|(i, _)| i).collect();
    Ok(Columns {
        id: find("id").ok_or_else(|| Error::missing("id"))?,
        cluster: find("cluster"),
        y: find("y"),
        pi_r: find("pi_r"),
        z: find("z"),
        pib: find("pib"),
        mhat: find("mhat"),
        x: prefixed("x_"),
        d: prefixed("d_"),
    })
}

fn cell(rec: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<Option<f64>> {
    let s = rec.get(idx).unwrap_or("").trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::CsvParse { row, message: format!("column {name:?}: {e} ({s:?})") })
}

/// Read records from any reader. `z_default` applies when there is no `z` column.
pub fn read_units<R: Read>(reader: R, z_default: u8) -> Result<UnitTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::CsvParse { row: 0, message: e.to_string() })?.clone();
    let cols = columns(&header)?;
    if z_default == 1 && cols.y.is_none() {
        return Err(Error::missing("y"));
    }
    if z_default == 0 && cols.pi_r.is_none() {
        return Err(Error::missing("pi_r"));
    }
    let mut records = Vec::new();
    let mut pib = cols.pib.map(|_| Vec::new());
    let mut mhat = cols.mhat.map(|_| Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::CsvParse { row, message: e.to_string() })?;
        let id = rec.get(cols.id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::CsvParse { row, message: "empty id".into() });
        }
        let mut x = Vec::with_capacity(cols.x.len());
        for &c in &cols.x {
            x.push(cell(&rec, c, row, &header[c])?.ok_or_else(|| Error::missing_on(&header[c], &id))?);
        }
        let d = if cols.d.is_empty() {
            None
        } else {
            let vals: Vec<Option<f64>> =
                cols.d.iter().map(|&c| cell(&rec, c, row, &header[c])).collect::<Result<_>>()?;
            if vals.iter().all(Option::is_none) {
                None
            } else {
                Some(vals.into_iter().zip(&cols.d).map(|(v, &c)| v.ok_or_else(|| Error::missing_on(&header[c], &id))).collect::<Result<_>>()?)
            }
        };
        let opt = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c {
                Some(c) => cell(&rec, c, row, name),
                None => Ok(None),
            }
        };
        let z = match opt(cols.z, "z")? {
            None => z_default,
            Some(v) if v == 0.0 || v == 1.0 => v as u8,
            Some(v) => return Err(Error::CsvParse { row, message: format!("z must be 0 or 1, got {v}") }),
        };
        let cluster = cols.cluster.and_then(|c| rec.get(c)).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        if let Some(v) = pib.as_mut() {
            v.push(opt(cols.pib, "pib")?);
        }
        if let Some(v) = mhat.as_mut() {
            v.push(opt(cols.mhat, "mhat")?);
        }
        records.push(UnitRecord { id, cluster_id: cluster, x, d, y: opt(cols.y, "y")?, pi_r: opt(cols.pi_r, "pi_r")?, z });
    }
    Ok(UnitTable { records, pib, mhat })
}

pub fn read_units_path(path: &Path, z_default: u8) -> Result<UnitTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_units(f, z_default)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Write records in the ingestion format. Widths come from the first record.
pub fn write_units<W: Write>(w: W, records: &[UnitRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let p = records.first().map(|r| r.x.len()).unwrap_or(0);
    let q = records.iter().find_map(|r| r.d.as_ref().map(Vec::len)).unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "cluster".into(), "z".into(), "y".into(), "pi_r".into()];
    header.extend((1..=p).map(|j| format!("x_{j}")));
    header.extend((1..=q).map(|j| format!("d_{j}")));
    wtr.write_record(&header).map_err(io)?;
    for r in records {
        let mut row = vec![r.id.clone(), r.cluster_id.clone().unwrap_or_default(), r.z.to_string(), fmt_opt(r.y), fmt_opt(r.pi_r)];
        row.extend(r.x.iter().map(|v| format!("{v}")));
        match &r.d {
            Some(d) => row.extend(d.iter().map(|v| format!("{v}"))),
            None => row.extend(std::iter::repeat_n(String::new(), q)),
        }
        wtr.write_record(&row).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let recs = vec![
            UnitRecord::reference("r1", vec![1.5, 2.0], Some(vec![0.25]), 0.1),
            UnitRecord::nonprob("b1", vec![0.5, -1.0], Some(vec![3.0]), 7.0).with_cluster("c9"),
        ];
        let mut buf = Vec::new();
        write_units(&mut buf, &recs).unwrap();
        let t = read_units(buf.as_slice(), 0).unwrap();
        assert_eq!(t.records, recs);
    }

    #[test]
    fn missing_y_column_named() {
        let text = "id,pi_r,x_1\na,0.5,1\n";
        match read_units(text.as_bytes(), 1) {
            Err(Error::MissingField { field, .. }) => assert_eq!(field, "y"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_row() {
        let text = "id,y,x_1\na,1,2\nb,oops,3\n";
        match read_units(text.as_bytes(), 1) {
            Err(Error::CsvParse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nuisance_columns() {
        let text = "id,y,pi_r,pib,mhat,x_1\na,1,0.5,0.5,1,0\nb,3,,0.25,2,0\n";
        let t = read_units(text.as_bytes(), 1).unwrap();
        assert_eq!(t.pib.unwrap(), vec![Some(0.5), Some(0.25)]);
        assert_eq!(t.mhat.unwrap(), vec![Some(1.0), Some(2.0)]);
        assert_eq!(t.records[1].pi_r, None);
    }
}
