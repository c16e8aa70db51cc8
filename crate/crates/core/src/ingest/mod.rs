//! Loading, validating, scaling, and windowing the store-week sales panel.
//!
//! The input is the 8-column weekly sales CSV
//! (`Store,Date,Weekly_Sales,Holiday_Flag,Temperature,Fuel_Price,CPI,Unemployment`,
//! any column order, case-insensitive header). Parsing produces a
//! [`PanelTable`] sorted by `(store, date)` with a weekly index `t_idx` and
//! `log_sales` added. Everything downstream (scalers, windows, folds) is a
//! pure function of that table.

mod scaler;
mod stats;
mod window;

pub use scaler::{MinMax, ScalerSet, ZScore, SCALED_COVARIATES};
pub use stats::{
    correlation_matrix, descriptive_stats, ColumnStats, CorrelationMatrix, StatsTable, STAT_COLUMNS,
};
pub use window::{
    build_windows, build_windows_filtered, chronological_split, cv_folds, forecast_window,
    holdout_protocol, holdout_windows,
    CvFold, HoldoutSplit, WindowSample, WindowSet, DECODER_FEATURES, ENCODER_FEATURES,
};

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

/// Required header names, canonical casing.
pub const CSV_COLUMNS: [&str; 8] = [
    "Store",
    "Date",
    "Weekly_Sales",
    "Holiday_Flag",
    "Temperature",
    "Fuel_Price",
    "CPI",
    "Unemployment",
];

/// Columns after preprocessing: the 8 raw ones plus `t_idx` and `log_sales`.
pub const PANEL_COLUMNS: usize = 10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("row {row}: unparseable date {value:?}")]
    BadDate { row: usize, value: String },
    #[error("row {row}: bad value {value:?} in column {column}")]
    BadValue {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: weekly sales {value} is not positive")]
    NonPositiveSales { row: usize, value: f64 },
    #[error("duplicate store-week: store {store}, {date}")]
    DuplicateStoreWeek { store: u32, date: NaiveDate },
    #[error("store {store}: week {date} breaks the weekly cadence")]
    IrregularCadence { store: u32, date: NaiveDate },
    #[error("panel is empty")]
    EmptyPanel,
    #[error("split leaves store {store} with an empty side")]
    DegenerateSplit { store: u32 },
    #[error("column {0} is constant on the training rows")]
    ConstantColumn(&'static str),
    #[error("store {store} has {weeks} weeks, fewer than the {needed} a window needs")]
    SeriesTooShort {
        store: u32,
        weeks: usize,
        needed: usize,
    },
    #[error("unknown store {0}")]
    UnknownStore(u32),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// One raw store-week observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SalesRecord {
    pub store: u32,
    pub date: NaiveDate,
    pub weekly_sales: f64,
    pub holiday_flag: u8,
    pub temperature: f64,
    pub fuel_price: f64,
    pub cpi: f64,
    pub unemployment: f64,
}

/// A validated record with its derived columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelRow {
    pub record: SalesRecord,
    /// Weeks since the earliest date in the source file.
    pub t_idx: u32,
    pub log_sales: f64,
}

/// Store-week panel sorted by `(store, date)`, one contiguous block per store.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelTable {
    rows: Vec<PanelRow>,
    stores: Vec<u32>,
    blocks: Vec<std::ops::Range<usize>>,
}

impl PanelTable {
    /// Validates raw records, sorts them, and derives `t_idx`/`log_sales`.
    pub fn from_records(mut records: Vec<SalesRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(IngestError::EmptyPanel);
        }
        for (i, r) in records.iter().enumerate() {
            validate_record(i + 1, r)?;
        }
        records.sort_by(|a, b| (a.store, a.date).cmp(&(b.store, b.date)));
        let origin = records.iter().map(|r| r.date).min().unwrap();
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            let days = (r.date - origin).num_days();
            if days % 7 != 0 {
                return Err(IngestError::IrregularCadence {
                    store: r.store,
                    date: r.date,
                });
            }
            rows.push(PanelRow {
                t_idx: (days / 7) as u32,
                log_sales: r.weekly_sales.ln(),
                record: r,
            });
        }
        Self::from_sorted_rows(rows)
    }

    /// Builds a table from rows already carrying derived columns. Rows are
    /// re-sorted; `t_idx` is kept as is.
    pub fn from_rows(mut rows: Vec<PanelRow>) -> Result<Self> {
        rows.sort_by(|a, b| (a.record.store, a.t_idx).cmp(&(b.record.store, b.t_idx)));
        Self::from_sorted_rows(rows)
    }

    fn from_sorted_rows(rows: Vec<PanelRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(IngestError::EmptyPanel);
        }
        let mut stores = Vec::new();
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 1..=rows.len() {
            let boundary = i == rows.len() || rows[i].record.store != rows[start].record.store;
            if !boundary {
                let (prev, cur) = (&rows[i - 1], &rows[i]);
                if cur.t_idx == prev.t_idx {
                    return Err(IngestError::DuplicateStoreWeek {
                        store: cur.record.store,
                        date: cur.record.date,
                    });
                }
                if cur.t_idx != prev.t_idx + 1 {
                    return Err(IngestError::IrregularCadence {
                        store: cur.record.store,
                        date: cur.record.date,
                    });
                }
                continue;
            }
            stores.push(rows[start].record.store);
            blocks.push(start..i);
            start = i;
        }
        Ok(Self {
            rows,
            stores,
            blocks,
        })
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_columns(&self) -> usize {
        PANEL_COLUMNS
    }

    /// Distinct store ids in ascending order; a store's position here is its
    /// categorical index.
    pub fn stores(&self) -> &[u32] {
        &self.stores
    }

    pub fn store_index(&self, store: u32) -> Option<usize> {
        self.stores.binary_search(&store).ok()
    }

    /// Like [`store_index`](Self::store_index) but failing with `UnknownStore`.
    pub fn require_store(&self, store: u32) -> Result<usize> {
        self.store_index(store).ok_or(IngestError::UnknownStore(store))
    }

    /// Rows of the `i`-th store, in date order.
    pub fn store_rows(&self, i: usize) -> &[PanelRow] {
        &self.rows[self.blocks[i].clone()]
    }

    pub fn max_t_idx(&self) -> u32 {
        self.rows.iter().map(|r| r.t_idx).max().unwrap_or(0)
    }

    /// Keeps rows satisfying `keep`; stores left without rows disappear.
    pub fn filter(&self, keep: impl Fn(&PanelRow) -> bool) -> Result<Self> {
        Self::from_sorted_rows(self.rows.iter().filter(|r| keep(r)).cloned().collect())
    }
}

fn validate_record(row: usize, r: &SalesRecord) -> Result<()> {
    let reals: [(&'static str, f64); 5] = [
        ("Weekly_Sales", r.weekly_sales),
        ("Temperature", r.temperature),
        ("Fuel_Price", r.fuel_price),
        ("CPI", r.cpi),
        ("Unemployment", r.unemployment),
    ];
    for (column, v) in reals {
        if !v.is_finite() {
            return Err(IngestError::BadValue {
                row,
                column,
                value: v.to_string(),
            });
        }
    }
    if r.weekly_sales <= 0.0 {
        return Err(IngestError::NonPositiveSales {
            row,
            value: r.weekly_sales,
        });
    }
    if r.holiday_flag > 1 {
        return Err(IngestError::BadValue {
            row,
            column: "Holiday_Flag",
            value: r.holiday_flag.to_string(),
        });
    }
    Ok(())
}

/// Day-month-year (`05-02-2010`, `05/02/2010`) first, ISO `2010-02-05` second.
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    ["%d-%m-%Y", "%d/%m/%Y", "%Y-%m-%d"]
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
}

pub fn parse_csv(path: impl AsRef<Path>) -> Result<PanelTable> {
    let file = std::fs::File::open(path)?;
    parse_csv_reader(file)
}

pub fn parse_csv_reader<R: Read>(reader: R) -> Result<PanelTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::UnequalLengths { .. }) => return Err(e.into()),
        Err(_) => csv::StringRecord::new(),
    };
    let lookup: HashMap<String, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect();
    let mut col = [0usize; 8];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = *lookup
            .get(&name.to_ascii_lowercase())
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |k: usize| rec.get(col[k]).unwrap_or("");
        let real = |k: usize| -> Result<f64> {
            let raw = field(k);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::BadValue {
                    row,
                    column: CSV_COLUMNS[k],
                    value: raw.to_string(),
                })
        };
        let store = field(0).parse::<u32>().map_err(|_| IngestError::BadValue {
            row,
            column: "Store",
            value: field(0).to_string(),
        })?;
        let date = parse_date(field(1)).ok_or_else(|| IngestError::BadDate {
            row,
            value: field(1).to_string(),
        })?;
        let holiday = real(3)?;
        if holiday != 0.0 && holiday != 1.0 {
            return Err(IngestError::BadValue {
                row,
                column: "Holiday_Flag",
                value: field(3).to_string(),
            });
        }
        records.push(SalesRecord {
            store,
            date,
            weekly_sales: real(2)?,
            holiday_flag: holiday as u8,
            temperature: real(4)?,
            fuel_price: real(5)?,
            cpi: real(6)?,
            unemployment: real(7)?,
        });
    }
    // duplicates must be reported as such, not as a cadence break
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert((r.store, r.date)) {
            return Err(IngestError::DuplicateStoreWeek {
                store: r.store,
                date: r.date,
            });
        }
    }
    PanelTable::from_records(records)
}

/// Writes records back out in the canonical 8-column layout.
pub fn write_csv<W: std::io::Write>(records: &[SalesRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.store.to_string(),
            r.date.format("%d-%m-%Y").to_string(),
            format!("{}", r.weekly_sales),
            r.holiday_flag.to_string(),
            format!("{}", r.temperature),
            format!("{}", r.fuel_price),
            format!("{}", r.cpi),
            format!("{}", r.unemployment),
        ])?;
    }
    w.flush()?;
    Ok(())
}
