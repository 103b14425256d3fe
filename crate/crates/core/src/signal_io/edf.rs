//! EDF / EDF+ reader and writer (16-bit little-endian samples).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
}

impl SignalSpec {
    /// A signal spanning the full 16-bit digital range.
    pub fn new(label: &str, physical_min: f64, physical_max: f64, samples_per_record: usize) -> Self {
        Self {
            label: label.to_string(),
            transducer: String::new(),
            physical_dimension: "uV".to_string(),
            physical_min,
            physical_max,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: String::new(),
            samples_per_record,
        }
    }

    fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn to_physical(&self, d: i16) -> f64 {
        (f64::from(d) - f64::from(self.digital_min)) * self.gain() + self.physical_min
    }

    /// Nearest digital code for a physical value, clamped to the digital range.
    pub fn to_digital(&self, v: f64) -> i16 {
        let d = (v - self.physical_min) / self.gain() + f64::from(self.digital_min);
        d.round().clamp(f64::from(self.digital_min), f64::from(self.digital_max)) as i16
    }

    pub fn is_annotation(&self) -> bool {
        self.label.trim() == "EDF Annotations"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StartDateTime {
    pub year: u16,
    pub month: u8,
    pub day: u8,
    pub hour: u8,
    pub minute: u8,
    pub second: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingHeader {
    pub version_tag: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start: StartDateTime,
    /// Free text of the reserved field ("EDF+C" / "EDF+D" for EDF+).
    pub reserved: String,
    pub num_data_records: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalSpec>,
}

impl RecordingHeader {
    pub fn header_len(&self) -> usize {
        256 + 256 * self.signals.len()
    }

    pub fn sample_rate(&self, signal: usize) -> f64 {
        self.signals[signal].samples_per_record as f64 / self.record_duration
    }

    pub fn duration_sec(&self) -> f64 {
        self.num_data_records as f64 * self.record_duration
    }

    /// Case-insensitive label lookup.
    pub fn find_signal(&self, label: &str) -> Result<usize> {
        let want = label.trim().to_lowercase();
        self.signals
            .iter()
            .position(|s| s.label.trim().to_lowercase() == want)
            .ok_or_else(|| Error::ChannelNotFound(label.to_string()))
    }

    fn record_samples(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record).sum()
    }
}

/// Parsed file with raw digital samples per signal.
#[derive(Clone, Debug)]
pub struct EdfFile {
    pub header: RecordingHeader,
    pub digital: Vec<Vec<i16>>,
}

impl EdfFile {
    pub fn physical(&self, signal: usize) -> Vec<f64> {
        let spec = &self.header.signals[signal];
        self.digital[signal].iter().map(|&d| spec.to_physical(d)).collect()
    }

    /// Raw bytes of an annotation signal, concatenated record by record.
    pub fn annotation_bytes(&self, signal: usize) -> Vec<u8> {
        self.digital[signal].iter().flat_map(|d| d.to_le_bytes()).collect()
    }

    /// Byte blocks of an annotation signal, one per data record.
    pub fn annotation_records(&self, signal: usize) -> Vec<Vec<u8>> {
        let n = self.header.signals[signal].samples_per_record;
        self.digital[signal]
            .chunks(n)
            .map(|c| c.iter().flat_map(|d| d.to_le_bytes()).collect())
            .collect()
    }
}

/// Parses an EDF stream into its header and per-signal physical samples.
pub fn parse_edf(bytes: &[u8]) -> Result<(RecordingHeader, Vec<Vec<f64>>)> {
    let file = parse_edf_digital(bytes)?;
    let physical = (0..file.header.signals.len()).map(|i| file.physical(i)).collect();
    Ok((file.header, physical))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        Ok(raw.iter().map(|&b| b as char).collect::<String>().trim_end().to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, n: usize, name: &str) -> Result<T> {
        let t = self.text(n)?;
        t.trim().parse().map_err(|_| Error::HeaderField(name.to_string()))
    }
}

fn parse_pair(s: &str, name: &str) -> Result<[u8; 3]> {
    let parts: Vec<&str> = s.trim().split(['.', ':']).collect();
    if parts.len() != 3 {
        return Err(Error::HeaderField(name.to_string()));
    }
    let mut out = [0u8; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| Error::HeaderField(name.to_string()))?;
    }
    Ok(out)
}

pub fn parse_edf_digital(bytes: &[u8]) -> Result<EdfFile> {
    let mut c = Cursor { bytes, pos: 0 };
    let version_tag = c.text(8)?;
    let patient_id = c.text(80)?;
    let recording_id = c.text(80)?;
    let [day, month, yy] = parse_pair(&c.text(8)?, "startdate")?;
    let [hour, minute, second] = parse_pair(&c.text(8)?, "starttime")?;
    let year = if yy >= 85 { 1900 + u16::from(yy) } else { 2000 + u16::from(yy) };
    let header_bytes: usize = c.number(8, "header_bytes")?;
    let reserved = c.text(44)?;
    let num_records: i64 = c.number(8, "num_data_records")?;
    let record_duration: f64 = c.number(8, "record_duration")?;
    let ns: usize = c.number(4, "num_signals")?;
    if ns == 0 || header_bytes != 256 + 256 * ns {
        return Err(Error::HeaderField("header_bytes".into()));
    }
    if !(record_duration > 0.0) {
        return Err(Error::HeaderField("record_duration".into()));
    }

    let texts = |c: &mut Cursor, w: usize| -> Result<Vec<String>> { (0..ns).map(|_| c.text(w)).collect() };
    let labels = texts(&mut c, 16)?;
    let transducers = texts(&mut c, 80)?;
    let dims = texts(&mut c, 8)?;
    let nums = |c: &mut Cursor, name: &str| -> Result<Vec<f64>> { (0..ns).map(|_| c.number(8, name)).collect() };
    let pmin = nums(&mut c, "physical_min")?;
    let pmax = nums(&mut c, "physical_max")?;
    let dmin = nums(&mut c, "digital_min")?;
    let dmax = nums(&mut c, "digital_max")?;
    let prefilters = texts(&mut c, 80)?;
    let spr: Vec<usize> = (0..ns).map(|_| c.number(8, "samples_per_record")).collect::<Result<_>>()?;
    c.take(32 * ns)?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let spec = SignalSpec {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmin[i],
            physical_max: pmax[i],
            digital_min: dmin[i] as i32,
            digital_max: dmax[i] as i32,
            prefilter: prefilters[i].clone(),
            samples_per_record: spr[i],
        };
        if spec.digital_min == spec.digital_max || spec.physical_min == spec.physical_max {
            return Err(Error::DegenerateCalibration { label: spec.label });
        }
        if spec.digital_min > spec.digital_max {
            return Err(Error::HeaderField("digital_min".into()));
        }
        if spec.samples_per_record == 0 {
            return Err(Error::HeaderField("samples_per_record".into()));
        }
        signals.push(spec);
    }

    let mut header = RecordingHeader {
        version_tag,
        patient_id,
        recording_id,
        start: StartDateTime {
            year,
            month,
            day,
            hour,
            minute,
            second,
        },
        reserved,
        num_data_records: 0,
        record_duration,
        signals,
    };
    let record_bytes = 2 * header.record_samples();
    header.num_data_records = if num_records < 0 {
        // -1 means "unknown"; use every complete record present.
        (bytes.len() - c.pos) / record_bytes
    } else {
        num_records as usize
    };

    let mut digital: Vec<Vec<i16>> = header
        .signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * header.num_data_records))
        .collect();
    for _ in 0..header.num_data_records {
        for (i, s) in header.signals.iter().enumerate() {
            let raw = c.take(2 * s.samples_per_record)?;
            digital[i].extend(raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
        }
    }
    Ok(EdfFile { header, digital })
}

fn field(out: &mut Vec<u8>, s: &str, width: usize) {
    let mut b: Vec<u8> = s.bytes().filter(|b| b.is_ascii() && !b.is_ascii_control()).take(width).collect();
    b.resize(width, b' ');
    out.extend_from_slice(&b);
}

/// Shortest decimal rendering that fits in `width` characters.
fn fmt_num(v: f64, width: usize) -> String {
    let s = format!("{v}");
    if s.len() <= width {
        return s;
    }
    for prec in (0..width).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= width {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

/// Serialises a header plus digital samples. `digital[i]` must hold
/// `num_data_records * samples_per_record` values for signal `i`.
pub fn write_edf(header: &RecordingHeader, digital: &[Vec<i16>]) -> Result<Vec<u8>> {
    let ns = header.signals.len();
    if digital.len() != ns {
        return Err(Error::Shape(format!("{} sample arrays for {ns} signals", digital.len())));
    }
    for (s, d) in header.signals.iter().zip(digital) {
        if d.len() != s.samples_per_record * header.num_data_records {
            return Err(Error::Shape(format!("signal `{}` has {} samples", s.label, d.len())));
        }
    }
    let mut out = Vec::with_capacity(header.header_len() + 2 * header.record_samples() * header.num_data_records);
    field(&mut out, if header.version_tag.is_empty() { "0" } else { &header.version_tag }, 8);
    field(&mut out, &header.patient_id, 80);
    field(&mut out, &header.recording_id, 80);
    let st = header.start;
    field(&mut out, &format!("{:02}.{:02}.{:02}", st.day, st.month, st.year % 100), 8);
    field(&mut out, &format!("{:02}.{:02}.{:02}", st.hour, st.minute, st.second), 8);
    field(&mut out, &header.header_len().to_string(), 8);
    field(&mut out, &header.reserved, 44);
    field(&mut out, &header.num_data_records.to_string(), 8);
    field(&mut out, &fmt_num(header.record_duration, 8), 8);
    field(&mut out, &ns.to_string(), 4);
    let sig = &header.signals;
    sig.iter().for_each(|s| field(&mut out, &s.label, 16));
    sig.iter().for_each(|s| field(&mut out, &s.transducer, 80));
    sig.iter().for_each(|s| field(&mut out, &s.physical_dimension, 8));
    sig.iter().for_each(|s| field(&mut out, &fmt_num(s.physical_min, 8), 8));
    sig.iter().for_each(|s| field(&mut out, &fmt_num(s.physical_max, 8), 8));
    sig.iter().for_each(|s| field(&mut out, &s.digital_min.to_string(), 8));
    sig.iter().for_each(|s| field(&mut out, &s.digital_max.to_string(), 8));
    sig.iter().for_each(|s| field(&mut out, &s.prefilter, 80));
    sig.iter().for_each(|s| field(&mut out, &s.samples_per_record.to_string(), 8));
    sig.iter().for_each(|_| field(&mut out, "", 32));
    for r in 0..header.num_data_records {
        for (s, d) in sig.iter().zip(digital) {
            let n = s.samples_per_record;
            for v in &d[r * n..(r + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Packs EDF+ annotation text into `samples_per_record` 16-bit words per record.
pub fn pack_annotation_records(records: &[Vec<u8>], samples_per_record: usize) -> Result<Vec<i16>> {
    let mut out = Vec::with_capacity(records.len() * samples_per_record);
    for r in records {
        if r.len() > 2 * samples_per_record {
            return Err(Error::Shape(format!("annotation record of {} bytes too long", r.len())));
        }
        let mut b = r.clone();
        b.resize(2 * samples_per_record, 0);
        out.extend(b.chunks_exact(2).map(|p| i16::from_le_bytes([p[0], p[1]])));
    }
    Ok(out)
}
