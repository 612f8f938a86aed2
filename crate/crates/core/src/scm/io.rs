use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Domain, HiddenColumns};
use super::spec::{ScmConfig, ScmSpec};
use crate::error::{Result, TcmError};
use crate::numerics::Matrix;

/// Learner-facing CSV contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvData {
    pub x: Matrix,
    pub labels: Vec<Option<usize>>,
    pub domain: Option<Domain>,
}

impl CsvData {
    pub fn into_dataset(self, spec_hash: String, seed: u64) -> Result<Dataset> {
        let domain = self.domain.ok_or_else(|| {
            TcmError::Contract("cannot build a dataset from a file with no rows".into())
        })?;
        Dataset::from_parts(spec_hash, domain, seed, self.x, self.labels, None)
    }
}

/// Writes `x0..x{n-1},y,domain`; `y` is empty where the label is hidden.
pub fn write_dataset_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("domain".into());
    out.write_record(&header)?;
    for (i, label) in d.learner_labels_raw().iter().enumerate() {
        let mut rec: Vec<String> = d.features().row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(label.map(|y| y.to_string()).unwrap_or_default());
        rec.push(d.domain.tag().into());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(r: R) -> Result<CsvData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(CsvData {
            x: Matrix::zeros(0, 0),
            labels: vec![],
            domain: None,
        });
    }
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "y" || cols[cols.len() - 1] != "domain" {
        return Err(TcmError::Contract(format!(
            "unexpected dataset header {cols:?}"
        )));
    }
    let n = cols.len() - 2;
    for (j, name) in cols[..n].iter().enumerate() {
        if *name != format!("x{j}") {
            return Err(TcmError::Contract(format!(
                "column {j} is `{name}`, expected `x{j}`"
            )));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for j in 0..n {
            let v: f64 = rec[j].parse().map_err(|_| {
                TcmError::Contract(format!("row {row}: cannot parse `{}` as a number", &rec[j]))
            })?;
            data.push(v);
        }
        let y = &rec[n];
        labels.push(if y.is_empty() {
            None
        } else {
            Some(
                y.parse()
                    .map_err(|_| TcmError::Contract(format!("row {row}: bad label `{y}`")))?,
            )
        });
        let dom: Domain = rec[n + 1].parse()?;
        match domain {
            None => domain = Some(dom),
            Some(d) if d != dom => {
                return Err(TcmError::Contract(format!(
                    "row {row}: mixed domains in one file"
                )))
            }
            _ => {}
        }
    }
    let rows = labels.len();
    Ok(CsvData {
        x: Matrix::from_vec(rows, n, data)?,
        labels,
        domain,
    })
}

/// Sidecar written next to generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec_hash: String,
    pub seed: u64,
    pub config: ScmConfig,
    pub spec: ScmSpec,
    pub source_hidden: HiddenColumns,
    pub target_hidden: HiddenColumns,
}

impl DatasetMeta {
    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.hash() != self.spec_hash {
            return Err(TcmError::Contract(
                "meta spec hash does not match the stored spec".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::scm::sample_dataset;

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = ScmSpec::generate(&ScmConfig::default(), &mut RngStream::new(0, 0)).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            let d = sample_dataset(&spec, domain, 30, &mut RngStream::new(1, 0)).unwrap();
            let mut buf = Vec::new();
            write_dataset_csv(&d, &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with("x0,x1,x2,x3,x4,x5,x6,x7,y,domain\n"));
            let back = read_dataset_csv(buf.as_slice()).unwrap();
            assert_eq!(back.domain, Some(domain));
            assert_eq!(&back.x, d.features());
            assert_eq!(back.labels, d.learner_labels_raw());
        }
    }

    #[test]
    fn empty_inputs() {
        let back = read_dataset_csv("".as_bytes()).unwrap();
        assert_eq!(back.labels.len(), 0);
        let back = read_dataset_csv("x0,x1,y,domain\n".as_bytes()).unwrap();
        assert_eq!(back.x.shape(), (0, 2));
        assert!(read_dataset_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
