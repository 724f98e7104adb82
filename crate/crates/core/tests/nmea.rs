use mapbot_core::nmea::{
    checksum_hex, decode_gprmc, emit_time_message, encode_gprmc, EastWest, FixStatus, GprmcFields, GprmcTemplate,
    Latitude, LidarChannelConfig, Longitude, MagneticVariation, NmeaDate, NmeaError, NorthSouth, UtcTime,
    MAX_SENTENCE_LEN,
};
use proptest::prelude::*;

const CANONICAL: &str = "$GPRMC,123519,A,4807.038,N,01131.000,E,022.4,084.4,230394,003.1,W*6A";

/// Byte-by-byte XOR of everything between `$` and `*`, written out by hand.
fn xor_oracle(sentence: &str) -> String {
    let start = sentence.find('$').unwrap() + 1;
    let end = sentence.find('*').unwrap();
    let mut acc = 0u8;
    for c in sentence[start..end].chars() {
        acc ^= c as u8;
    }
    const HEX: &[u8; 16] = b"0123456789ABCDEF";
    String::from_utf8(vec![HEX[(acc >> 4) as usize], HEX[(acc & 15) as usize]]).unwrap()
}

fn canonical() -> GprmcFields {
    GprmcFields {
        utc_time: UtcTime {
            hour: 12,
            minute: 35,
            second: 19,
            millis: 0,
        },
        status: FixStatus::Active,
        latitude: Latitude {
            degrees: 48,
            milliminutes: 7_038,
            hemisphere: NorthSouth::N,
        },
        longitude: Longitude {
            degrees: 11,
            milliminutes: 31_000,
            hemisphere: EastWest::E,
        },
        speed_tenths_knots: 224,
        course_tenths_deg: 844,
        date: NmeaDate {
            day: 23,
            month: 3,
            year: 94,
        },
        magvar: Some(MagneticVariation {
            tenths_deg: 31,
            direction: EastWest::W,
        }),
    }
}

#[test]
fn canonical_checksum_by_oracle() {
    assert_eq!(xor_oracle(CANONICAL), "6A");
    let payload = &CANONICAL[1..CANONICAL.len() - 3];
    assert_eq!(checksum_hex(payload.as_bytes()), "6A");
}

#[test]
fn canonical_round_trips_bit_exactly() {
    let encoded = encode_gprmc(&canonical()).unwrap();
    assert_eq!(encoded, format!("{CANONICAL}\r\n"));
    assert_eq!(decode_gprmc(&encoded).unwrap(), canonical());
    assert_eq!(decode_gprmc(CANONICAL).unwrap(), canonical());
    let f = decode_gprmc(CANONICAL).unwrap();
    assert!((f.latitude_deg() - (48.0 + 7.038 / 60.0)).abs() < 1e-12);
    assert!((f.longitude_deg() - (11.0 + 31.0 / 60.0)).abs() < 1e-12);
}

#[test]
fn wrong_checksum_is_rejected() {
    let bad = CANONICAL.replace("*6A", "*6B");
    assert_eq!(
        decode_gprmc(&bad),
        Err(NmeaError::BadChecksum {
            computed: 0x6a,
            found: 0x6b
        })
    );
}

#[test]
fn framing_errors() {
    assert_eq!(decode_gprmc(&CANONICAL[1..]), Err(NmeaError::MissingStart));
    assert_eq!(decode_gprmc(&CANONICAL[..CANONICAL.len() - 3]), Err(NmeaError::MissingChecksum));
    let gga = "$GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,";
    let gga = format!("{gga}*{}", xor_oracle(&format!("{gga}*")));
    assert!(matches!(decode_gprmc(&gga), Err(NmeaError::WrongType(_))));
}

#[test]
fn out_of_range_fields_do_not_encode() {
    let mut f = canonical();
    f.utc_time.hour = 24;
    assert!(matches!(encode_gprmc(&f), Err(NmeaError::FieldRange { .. })));
    let mut f = canonical();
    f.date.month = 13;
    assert!(encode_gprmc(&f).is_err());
}

#[test]
fn template_seconds_round_trip() {
    let t = GprmcTemplate {
        utc_epoch_unix_s: 1_700_000_000,
        ..GprmcTemplate::default()
    };
    for s in [0, 1, 59, 3_600, 86_399, 86_400, 1_000_000] {
        let f = t.fields_for(s).unwrap();
        assert_eq!(t.master_second_of(&f), Some(s));
    }
}

#[test]
fn time_message_fits_inside_the_second() {
    let m = emit_time_message(&LidarChannelConfig::default(), &GprmcTemplate::default(), 5).unwrap();
    assert!(m.transmit_start_s >= 5.0);
    assert!(m.transmit_start_s + m.transmit_duration_s < 6.0);
    assert!(m.sentence.len() <= MAX_SENTENCE_LEN);
}

fn fields() -> impl Strategy<Value = GprmcFields> {
    (
        (0u8..24, 0u8..60, 0u8..60, prop_oneof![Just(0u16), 1u16..1000]),
        any::<bool>(),
        (0u8..90, 0u32..60_000, any::<bool>()),
        (0u16..180, 0u32..60_000, any::<bool>()),
        (0u32..10_000, 0u16..3600),
        (1u8..=31, 1u8..=12, 0u8..100),
        proptest::option::of((0u16..=1800, any::<bool>())),
    )
        .prop_map(|(t, active, lat, lon, (speed, course), d, mv)| GprmcFields {
            utc_time: UtcTime {
                hour: t.0,
                minute: t.1,
                second: t.2,
                millis: t.3,
            },
            status: if active { FixStatus::Active } else { FixStatus::Void },
            latitude: Latitude {
                degrees: lat.0,
                milliminutes: lat.1,
                hemisphere: if lat.2 { NorthSouth::N } else { NorthSouth::S },
            },
            longitude: Longitude {
                degrees: lon.0,
                milliminutes: lon.1,
                hemisphere: if lon.2 { EastWest::E } else { EastWest::W },
            },
            speed_tenths_knots: speed,
            course_tenths_deg: course,
            date: NmeaDate {
                day: d.0,
                month: d.1,
                year: d.2,
            },
            magvar: mv.map(|(v, e)| MagneticVariation {
                tenths_deg: v,
                direction: if e { EastWest::E } else { EastWest::W },
            }),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fields_round_trip(f in fields()) {
        let s = encode_gprmc(&f).unwrap();
        prop_assert!(s.len() <= MAX_SENTENCE_LEN);
        prop_assert_eq!(&s[s.len() - 4..s.len() - 2], xor_oracle(&s));
        let back = decode_gprmc(&s).unwrap();
        prop_assert_eq!(back, f);
        prop_assert_eq!(encode_gprmc(&back).unwrap(), s);
    }

    #[test]
    fn single_byte_corruption_is_caught(pos in 1usize..CANONICAL.len() - 3, byte in 0x20u8..0x7f) {
        let mut b = CANONICAL.as_bytes().to_vec();
        prop_assume!(b[pos] != byte && byte != b'*' && byte != b'$');
        b[pos] = byte;
        let s = String::from_utf8(b).unwrap();
        prop_assert!(decode_gprmc(&s).is_err());
    }

    #[test]
    fn arbitrary_input_never_panics(s in "\\PC{0,100}") {
        let _ = decode_gprmc(&s);
    }
}
