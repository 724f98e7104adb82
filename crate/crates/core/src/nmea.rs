//! NMEA 0183 GPRMC codec and the GPRMC+PPS LiDAR time channel.
//!
//! Numeric fields are fixed-point integers (milliminutes, tenths) so that
//! `decode(encode(f)) == f` holds exactly. The encoder always writes the
//! canonical layout `hhmmss[.sss],A,DDMM.mmm,N,DDDMM.mmm,E,SSS.s,CCC.c,ddmmyy,VVV.v,W`.

use std::fmt;

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{div_round_half_even, Nanos, NANOS_PER_SEC};

pub const MAX_SENTENCE_LEN: usize = 82;
/// 8N1 serial framing: start bit, 8 data bits, stop bit.
pub const BITS_PER_BYTE: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum NmeaError {
    #[error("sentence does not start with '$'")]
    MissingStart,
    #[error("sentence has no '*hh' checksum")]
    MissingChecksum,
    #[error("checksum mismatch: computed {computed:02X}, sentence carries {found:02X}")]
    BadChecksum { computed: u8, found: u8 },
    #[error("not a GPRMC sentence: {0}")]
    WrongType(String),
    #[error("malformed {field}: {value:?}")]
    Malformed { field: &'static str, value: String },
    #[error("{field} out of range: {detail}")]
    FieldRange { field: &'static str, detail: String },
    #[error("encoded sentence is {0} bytes, limit is 82")]
    TooLong(usize),
    #[error("invalid LiDAR channel: {0}")]
    Channel(String),
    #[error("sentence overruns the second: offset {offset_s} s + transmission {duration_s} s >= 1 s")]
    SentenceOverrun { offset_s: f64, duration_s: f64 },
}

/// XOR of all bytes between `$` and `*`.
pub fn checksum(payload: &[u8]) -> u8 {
    payload.iter().fold(0, |acc, b| acc ^ b)
}

/// Two uppercase hex digits of [`checksum`].
pub fn checksum_hex(payload: &[u8]) -> String {
    format!("{:02X}", checksum(payload))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtcTime {
    pub hour: u8,
    pub minute: u8,
    pub second: u8,
    #[serde(default)]
    pub millis: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixStatus {
    #[serde(rename = "A")]
    Active,
    #[serde(rename = "V")]
    Void,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NorthSouth {
    N,
    S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EastWest {
    E,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latitude {
    pub degrees: u8,
    /// Minutes in units of 0.001'.
    pub milliminutes: u32,
    pub hemisphere: NorthSouth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Longitude {
    pub degrees: u16,
    pub milliminutes: u32,
    pub hemisphere: EastWest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagneticVariation {
    pub tenths_deg: u16,
    pub direction: EastWest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmeaDate {
    pub day: u8,
    pub month: u8,
    /// Two-digit year.
    pub year: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GprmcFields {
    pub utc_time: UtcTime,
    pub status: FixStatus,
    pub latitude: Latitude,
    pub longitude: Longitude,
    pub speed_tenths_knots: u32,
    pub course_tenths_deg: u16,
    pub date: NmeaDate,
    #[serde(default)]
    pub magvar: Option<MagneticVariation>,
}

impl GprmcFields {
    pub fn speed_knots(&self) -> f64 {
        self.speed_tenths_knots as f64 / 10.0
    }

    pub fn course_deg(&self) -> f64 {
        self.course_tenths_deg as f64 / 10.0
    }

    pub fn latitude_deg(&self) -> f64 {
        let v = self.latitude.degrees as f64 + self.latitude.milliminutes as f64 / 60_000.0;
        match self.latitude.hemisphere {
            NorthSouth::N => v,
            NorthSouth::S => -v,
        }
    }

    pub fn longitude_deg(&self) -> f64 {
        let v = self.longitude.degrees as f64 + self.longitude.milliminutes as f64 / 60_000.0;
        match self.longitude.hemisphere {
            EastWest::E => v,
            EastWest::W => -v,
        }
    }

    /// Seconds since midnight UTC carried by the sentence, whole seconds only.
    pub fn second_of_day(&self) -> u32 {
        self.utc_time.hour as u32 * 3600 + self.utc_time.minute as u32 * 60 + self.utc_time.second as u32
    }

    pub fn validate(&self) -> Result<(), NmeaError> {
        let t = &self.utc_time;
        range(t.hour < 24, "utc hour", t.hour)?;
        range(t.minute < 60, "utc minute", t.minute)?;
        range(t.second < 60, "utc second", t.second)?;
        range(t.millis < 1000, "utc millis", t.millis)?;
        let lat = &self.latitude;
        range(lat.milliminutes < 60_000, "latitude minutes", lat.milliminutes)?;
        range(
            lat.degrees < 90 || (lat.degrees == 90 && lat.milliminutes == 0),
            "latitude degrees",
            lat.degrees,
        )?;
        let lon = &self.longitude;
        range(lon.milliminutes < 60_000, "longitude minutes", lon.milliminutes)?;
        range(
            lon.degrees < 180 || (lon.degrees == 180 && lon.milliminutes == 0),
            "longitude degrees",
            lon.degrees,
        )?;
        range(self.speed_tenths_knots < 100_000, "speed", self.speed_tenths_knots)?;
        range(self.course_tenths_deg < 3600, "course", self.course_tenths_deg)?;
        let d = &self.date;
        range((1..=31).contains(&d.day), "day", d.day)?;
        range((1..=12).contains(&d.month), "month", d.month)?;
        range(d.year < 100, "year", d.year)?;
        if let Some(m) = &self.magvar {
            range(m.tenths_deg <= 1800, "magnetic variation", m.tenths_deg)?;
        }
        Ok(())
    }
}

fn range<T: fmt::Display>(ok: bool, field: &'static str, v: T) -> Result<(), NmeaError> {
    if ok {
        Ok(())
    } else {
        Err(NmeaError::FieldRange {
            field,
            detail: v.to_string(),
        })
    }
}

fn tenths(v: u32) -> String {
    format!("{:03}.{}", v / 10, v % 10)
}

/// Encode as `$GPRMC,...*hh\r\n`.
pub fn encode_gprmc(f: &GprmcFields) -> Result<String, NmeaError> {
    f.validate()?;
    let t = &f.utc_time;
    let mut time = format!("{:02}{:02}{:02}", t.hour, t.minute, t.second);
    if t.millis != 0 {
        time.push_str(&format!(".{:03}", t.millis));
    }
    let lat = &f.latitude;
    let lon = &f.longitude;
    let (magvar, magdir) = match &f.magvar {
        Some(m) => (tenths(m.tenths_deg as u32), format!("{:?}", m.direction)),
        None => (String::new(), String::new()),
    };
    let payload = format!(
        "GPRMC,{},{},{:02}{:02}.{:03},{:?},{:03}{:02}.{:03},{:?},{},{},{:02}{:02}{:02},{},{}",
        time,
        match f.status {
            FixStatus::Active => 'A',
            FixStatus::Void => 'V',
        },
        lat.degrees,
        lat.milliminutes / 1000,
        lat.milliminutes % 1000,
        lat.hemisphere,
        lon.degrees,
        lon.milliminutes / 1000,
        lon.milliminutes % 1000,
        lon.hemisphere,
        tenths(f.speed_tenths_knots),
        tenths(f.course_tenths_deg as u32),
        f.date.day,
        f.date.month,
        f.date.year,
        magvar,
        magdir,
    );
    let sentence = format!("${}*{}\r\n", payload, checksum_hex(payload.as_bytes()));
    if sentence.len() > MAX_SENTENCE_LEN {
        return Err(NmeaError::TooLong(sentence.len()));
    }
    Ok(sentence)
}

/// Parse and checksum-verify a GPRMC sentence. The trailing CRLF is optional
/// and a trailing NMEA 2.3 mode indicator is accepted and ignored.
pub fn decode_gprmc(sentence: &str) -> Result<GprmcFields, NmeaError> {
    let s = sentence.trim_end_matches(['\r', '\n']);
    let body = s.strip_prefix('$').ok_or(NmeaError::MissingStart)?;
    let (payload, cs) = body.rsplit_once('*').ok_or(NmeaError::MissingChecksum)?;
    if cs.len() != 2 {
        return Err(NmeaError::MissingChecksum);
    }
    let found = u8::from_str_radix(cs, 16).map_err(|_| NmeaError::MissingChecksum)?;
    let computed = checksum(payload.as_bytes());
    if computed != found {
        return Err(NmeaError::BadChecksum { computed, found });
    }

    let fields: Vec<&str> = payload.split(',').collect();
    if fields[0] != "GPRMC" {
        return Err(NmeaError::WrongType(fields[0].to_string()));
    }
    if fields.len() != 12 && fields.len() != 13 {
        return Err(NmeaError::Malformed {
            field: "field count",
            value: fields.len().to_string(),
        });
    }

    let f = GprmcFields {
        utc_time: parse_time(fields[1])?,
        status: match fields[2] {
            "A" => FixStatus::Active,
            "V" => FixStatus::Void,
            other => return Err(malformed("status", other)),
        },
        latitude: {
            let (degrees, milliminutes) = parse_angle(fields[3], 2, "latitude")?;
            Latitude {
                degrees: degrees as u8,
                milliminutes,
                hemisphere: match fields[4] {
                    "N" => NorthSouth::N,
                    "S" => NorthSouth::S,
                    other => return Err(malformed("latitude hemisphere", other)),
                },
            }
        },
        longitude: {
            let (degrees, milliminutes) = parse_angle(fields[5], 3, "longitude")?;
            Longitude {
                degrees: degrees as u16,
                milliminutes,
                hemisphere: parse_ew(fields[6], "longitude hemisphere")?,
            }
        },
        speed_tenths_knots: parse_fixed(fields[7], 1, "speed")? as u32,
        course_tenths_deg: u16::try_from(parse_fixed(fields[8], 1, "course")?)
            .map_err(|_| malformed("course", fields[8]))?,
        date: parse_date(fields[9])?,
        magvar: match (fields[10], fields[11]) {
            ("", "") => None,
            (v, d) => Some(MagneticVariation {
                tenths_deg: u16::try_from(parse_fixed(v, 1, "magnetic variation")?)
                    .map_err(|_| malformed("magnetic variation", v))?,
                direction: parse_ew(d, "magnetic variation direction")?,
            }),
        },
    };
    f.validate()?;
    Ok(f)
}

fn malformed(field: &'static str, value: &str) -> NmeaError {
    NmeaError::Malformed {
        field,
        value: value.to_string(),
    }
}

fn parse_ew(s: &str, field: &'static str) -> Result<EastWest, NmeaError> {
    match s {
        "E" => Ok(EastWest::E),
        "W" => Ok(EastWest::W),
        other => Err(malformed(field, other)),
    }
}

fn digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Parse `int[.frac]` into an integer scaled by `10^scale`, rounding extra
/// fraction digits half-to-even.
fn parse_fixed(s: &str, scale: u32, field: &'static str) -> Result<u64, NmeaError> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if !digits(int) || !(frac.is_empty() || digits(frac)) || int.len() > 9 || frac.len() > 9 {
        return Err(malformed(field, s));
    }
    let int: u64 = int.parse().unwrap();
    let frac_v: i128 = if frac.is_empty() { 0 } else { frac.parse().unwrap() };
    let frac_scaled = div_round_half_even(frac_v * 10i128.pow(scale), 10i128.pow(frac.len() as u32));
    Ok(int * 10u64.pow(scale) + frac_scaled as u64)
}

fn parse_angle(s: &str, deg_digits: usize, field: &'static str) -> Result<(u32, u32), NmeaError> {
    let int_len = s.find('.').unwrap_or(s.len());
    if int_len != deg_digits + 2 {
        return Err(malformed(field, s));
    }
    let degrees: u32 = s[..deg_digits].parse().map_err(|_| malformed(field, s))?;
    let milliminutes = parse_fixed(&s[deg_digits..], 3, field)?;
    Ok((degrees, milliminutes as u32))
}

fn parse_time(s: &str) -> Result<UtcTime, NmeaError> {
    let int_len = s.find('.').unwrap_or(s.len());
    if int_len != 6 || !digits(&s[..6]) {
        return Err(malformed("utc time", s));
    }
    let millis = parse_fixed(&format!("0{}", &s[6..]), 3, "utc time")?;
    if millis >= 1000 {
        return Err(malformed("utc time", s));
    }
    Ok(UtcTime {
        hour: s[0..2].parse().unwrap(),
        minute: s[2..4].parse().unwrap(),
        second: s[4..6].parse().unwrap(),
        millis: millis as u16,
    })
}

fn parse_date(s: &str) -> Result<NmeaDate, NmeaError> {
    if s.len() != 6 || !digits(s) {
        return Err(malformed("date", s));
    }
    Ok(NmeaDate {
        day: s[0..2].parse().unwrap(),
        month: s[2..4].parse().unwrap(),
        year: s[4..6].parse().unwrap(),
    })
}

/// A pulse marking the exact start of a UTC second on the master clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PpsPulse {
    pub true_emit_ns: Nanos,
    pub marks_second: i64,
}

impl PpsPulse {
    pub fn at_second(second: i64) -> Self {
        Self {
            true_emit_ns: second * NANOS_PER_SEC,
            marks_second: second,
        }
    }

    pub fn true_emit_time(&self) -> f64 {
        self.true_emit_ns as f64 / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LidarChannelConfig {
    pub baud_rate: u32,
    /// Metadata only; the simulation carries logical bits.
    #[serde(default)]
    pub inverted_level: bool,
    #[serde(default)]
    pub sentence_offset_ms: u32,
}

impl Default for LidarChannelConfig {
    fn default() -> Self {
        Self {
            baud_rate: 9600,
            inverted_level: false,
            sentence_offset_ms: 0,
        }
    }
}

impl LidarChannelConfig {
    pub fn validate(&self) -> Result<(), NmeaError> {
        if self.baud_rate == 0 {
            return Err(NmeaError::Channel("baud rate must be positive".into()));
        }
        if self.sentence_offset_ms >= 1000 {
            return Err(NmeaError::Channel(format!(
                "sentence offset {} ms must be below 1000 ms",
                self.sentence_offset_ms
            )));
        }
        Ok(())
    }
}

/// Wire time of `len_bytes` at `baud_rate` with 8N1 framing, seconds.
pub fn transmit_duration(len_bytes: usize, baud_rate: u32) -> f64 {
    (BITS_PER_BYTE as f64 * len_bytes as f64) / baud_rate as f64
}

/// Constant GPRMC content around the timestamp. `utc_epoch_unix_s` is the
/// UTC instant of master second 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GprmcTemplate {
    pub utc_epoch_unix_s: i64,
    pub status: FixStatus,
    pub latitude: Latitude,
    pub longitude: Longitude,
    pub speed_tenths_knots: u32,
    pub course_tenths_deg: u16,
    pub magvar: Option<MagneticVariation>,
}

impl Default for GprmcTemplate {
    fn default() -> Self {
        Self {
            utc_epoch_unix_s: 0,
            status: FixStatus::Active,
            latitude: Latitude {
                degrees: 31,
                milliminutes: 10_842,
                hemisphere: NorthSouth::N,
            },
            longitude: Longitude {
                degrees: 121,
                milliminutes: 35_472,
                hemisphere: EastWest::E,
            },
            speed_tenths_knots: 0,
            course_tenths_deg: 0,
            magvar: None,
        }
    }
}

impl GprmcTemplate {
    pub fn fields_for(&self, master_second: i64) -> Result<GprmcFields, NmeaError> {
        let unix = self.utc_epoch_unix_s + master_second;
        let dt = DateTime::from_timestamp(unix, 0).ok_or(NmeaError::FieldRange {
            field: "utc second",
            detail: unix.to_string(),
        })?;
        Ok(GprmcFields {
            utc_time: UtcTime {
                hour: dt.hour() as u8,
                minute: dt.minute() as u8,
                second: dt.second() as u8,
                millis: 0,
            },
            status: self.status,
            latitude: self.latitude,
            longitude: self.longitude,
            speed_tenths_knots: self.speed_tenths_knots,
            course_tenths_deg: self.course_tenths_deg,
            date: NmeaDate {
                day: dt.day() as u8,
                month: dt.month() as u8,
                year: dt.year().rem_euclid(100) as u8,
            },
            magvar: self.magvar,
        })
    }

    /// Master second named by decoded fields, resolved against this template's epoch.
    pub fn master_second_of(&self, f: &GprmcFields) -> Option<i64> {
        let year = 2000 + f.date.year as i32;
        let year = if year > 2069 { year - 100 } else { year };
        let date = chrono::NaiveDate::from_ymd_opt(year, f.date.month as u32, f.date.day as u32)?;
        let unix = date
            .and_hms_opt(f.utc_time.hour as u32, f.utc_time.minute as u32, f.utc_time.second as u32)?
            .and_utc()
            .timestamp();
        Some(unix - self.utc_epoch_unix_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMessage {
    pub pps: PpsPulse,
    pub sentence: String,
    pub transmit_start_s: f64,
    pub transmit_duration_s: f64,
}

/// PPS and its GPRMC sentence for `master_second`.
pub fn emit_time_message(
    config: &LidarChannelConfig,
    template: &GprmcTemplate,
    master_second: i64,
) -> Result<TimeMessage, NmeaError> {
    config.validate()?;
    let sentence = encode_gprmc(&template.fields_for(master_second)?)?;
    let duration = transmit_duration(sentence.len(), config.baud_rate);
    let offset = config.sentence_offset_ms as f64 / 1000.0;
    if offset + duration >= 1.0 {
        return Err(NmeaError::SentenceOverrun {
            offset_s: offset,
            duration_s: duration,
        });
    }
    let pps = PpsPulse::at_second(master_second);
    Ok(TimeMessage {
        pps,
        transmit_start_s: pps.true_emit_time() + offset,
        transmit_duration_s: duration,
        sentence,
    })
}
