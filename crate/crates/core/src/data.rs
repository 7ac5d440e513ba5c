//! Encoded samples, CSV ingestion and minibatching.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HienError, Result};
use crate::schema::FeatureSchema;

/// Reserved index for out-of-vocabulary values and padding.
pub const OOV: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub user_attrs: Vec<usize>,
    pub item_attrs: Vec<usize>,
    pub context: Vec<usize>,
    pub behaviors: Vec<usize>,
    pub label: u8,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>, split: Split) -> Self {
        Dataset {
            schema,
            samples,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.is_positive()).count() as f64 / self.samples.len() as f64
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.label)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.column_names()).map_err(csv_io)?;
        for s in &self.samples {
            let mut rec: Vec<String> = vec![s.user.to_string(), s.item.to_string()];
            rec.extend(s.user_attrs.iter().map(usize::to_string));
            rec.extend(s.item_attrs.iter().map(usize::to_string));
            rec.extend(s.context.iter().map(usize::to_string));
            rec.push(
                s.behaviors
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("|"),
            );
            rec.push(s.label.to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_io(e: csv::Error) -> HienError {
    HienError::Io(std::io::Error::other(e.to_string()))
}

/// Reads a CSV file whose header names every schema column.
pub fn load_csv(path: &Path, schema: &FeatureSchema, split: Split) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), schema, split)
}

/// Parses CSV from any reader. Categorical values at or beyond their
/// field's vocab map to [`OOV`]; behaviour lists keep their last
/// `max_behaviors` entries.
pub fn read_csv<R: Read>(input: R, schema: &FeatureSchema, split: Split) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_io)?.iter().map(String::from).collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HienError::Schema(format!("missing column `{name}`")))
    };
    let user_c = col(&schema.user.name)?;
    let item_c = col(&schema.item.name)?;
    let ua_c = schema.user_attrs.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let ia_c = schema.item_attrs.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let ctx_c = schema.context.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let beh_c = col(&schema.behaviors)?;
    let label_c = col("label")?;

    let mut samples = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| HienError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let index = |c: usize, vocab: usize| -> Result<usize> {
            let raw = cell(c);
            let v: usize = raw.parse().map_err(|_| HienError::Parse {
                line,
                msg: format!("non-integer value `{raw}` in column `{}`", header[c]),
            })?;
            Ok(if v < vocab { v } else { OOV })
        };
        let label = match cell(label_c) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(HienError::Parse {
                    line,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        let mut behaviors = Vec::new();
        let raw = cell(beh_c);
        if !raw.is_empty() {
            for tok in raw.split('|') {
                let v: usize = tok.trim().parse().map_err(|_| HienError::Parse {
                    line,
                    msg: format!("non-integer behaviour id `{tok}`"),
                })?;
                behaviors.push(if v < schema.item.vocab { v } else { OOV });
            }
        }
        if behaviors.len() > schema.max_behaviors {
            behaviors.drain(..behaviors.len() - schema.max_behaviors);
        }

        samples.push(Sample {
            user: index(user_c, schema.user.vocab)?,
            item: index(item_c, schema.item.vocab)?,
            user_attrs: ua_c
                .iter()
                .zip(&schema.user_attrs)
                .map(|(&c, f)| index(c, f.vocab))
                .collect::<Result<_>>()?,
            item_attrs: ia_c
                .iter()
                .zip(&schema.item_attrs)
                .map(|(&c, f)| index(c, f.vocab))
                .collect::<Result<_>>()?,
            context: ctx_c
                .iter()
                .zip(&schema.context)
                .map(|(&c, f)| index(c, f.vocab))
                .collect::<Result<_>>()?,
            behaviors,
            label,
        });
    }
    Ok(Dataset::new(schema.clone(), samples, split))
}

/// Splits `samples` into groups of `batch_size` in an order fixed by
/// `shuffle_seed` (`None` keeps dataset order). Every sample appears once;
/// the last batch may be short.
pub fn batches(samples: &[Sample], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<&Sample>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::parse(
            "user uid 10\nitem iid 10\nuser_attr age 4\nitem_attr cat 3\ncontext hour 5\nbehaviors hist max_len=3\n",
        )
        .unwrap()
    }

    #[test]
    fn loads_two_rows() {
        let csv = "uid,iid,age,cat,hour,hist,label\n1,2,3,1,4,2|3,1\n2,3,1,2,0,,0\n";
        let d = read_csv(csv.as_bytes(), &schema(), Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples[0].behaviors, vec![2, 3]);
        assert!(d.samples[1].behaviors.is_empty());
        assert_eq!(d.samples[1].label, 0);
    }

    #[test]
    fn unseen_category_maps_to_oov() {
        let csv = "uid,iid,age,cat,hour,hist,label\n1,2,3,7,4,,1\n";
        let d = read_csv(csv.as_bytes(), &schema(), Split::Train).unwrap();
        assert_eq!(d.samples[0].item_attrs, vec![OOV]);
    }

    #[test]
    fn header_without_label_is_rejected() {
        let csv = "uid,iid,age,cat,hour,hist\n1,2,3,1,4,\n";
        let err = read_csv(csv.as_bytes(), &schema(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn non_integer_label_is_a_parse_error() {
        let csv = "uid,iid,age,cat,hour,hist,label\n1,2,3,1,4,,yes\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema(), Split::Train),
            Err(HienError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn behaviours_are_capped_keeping_latest() {
        let csv = "uid,iid,age,cat,hour,hist,label\n1,2,3,1,4,1|2|3|4|5,1\n";
        let d = read_csv(csv.as_bytes(), &schema(), Split::Train).unwrap();
        assert_eq!(d.samples[0].behaviors, vec![3, 4, 5]);
    }

    fn ten() -> Vec<Sample> {
        (0..10)
            .map(|i| Sample {
                user: i,
                item: i,
                user_attrs: vec![],
                item_attrs: vec![],
                context: vec![],
                behaviors: vec![],
                label: 0,
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let s = ten();
        let sizes: Vec<usize> = batches(&s, 4, Some(1)).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches(&s, 1, None).len(), 10);
    }

    #[test]
    fn shuffled_batches_cover_everything_deterministically() {
        let s = ten();
        let a: Vec<usize> = batches(&s, 3, Some(9)).concat().iter().map(|x| x.user).collect();
        let b: Vec<usize> = batches(&s, 3, Some(9)).concat().iter().map(|x| x.user).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
