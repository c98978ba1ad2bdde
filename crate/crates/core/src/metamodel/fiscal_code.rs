//! Decoder for the Italian personal tax code (codice fiscale).
//!
//! Layout: 3 surname letters, 3 name letters, 2 year digits, 1 month letter,
//! 2 day digits (+40 for women), 4-char cadastral place code, 1 check letter.
//! Digits in the date and place positions may be substituted by letters
//! (omocodia) when two people would otherwise share a code.

use chrono::NaiveDate;

/// Two-digit years up to this value are read as 20xx, the rest as 19xx.
pub const CENTURY_PIVOT: u32 = 25;

const MONTH_LETTERS: &[u8; 12] = b"ABCDEHLMPRST";
const OMOCODIA_LETTERS: &[u8; 10] = b"LMNPQRSTUV";
const OMOCODIA_POSITIONS: [usize; 7] = [6, 7, 9, 10, 12, 13, 14];
const ODD_WEIGHTS: [u32; 26] = [
    1, 0, 5, 7, 9, 13, 15, 17, 19, 21, 2, 4, 18, 20, 11, 3, 6, 8, 12, 14, 16, 10, 22, 25, 24, 23,
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedFiscalCode {
    pub birth_date: NaiveDate,
    pub birth_place_code: String,
    pub gender: Gender,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FiscalCodeError {
    #[error("fiscal code must have 16 alphanumeric characters")]
    BadLength,
    #[error("malformed fiscal code at position {0}")]
    Malformed(usize),
    #[error("check character mismatch: expected {expected}, found {found}")]
    CheckMismatch { expected: char, found: char },
    #[error("fiscal code encodes an impossible date")]
    BadDate,
}

/// Check character over the first 15 characters.
pub fn check_character(first15: &[u8]) -> char {
    let sum: u32 = first15
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let ordinal = if c.is_ascii_digit() {
                (c - b'0') as usize
            } else {
                (c - b'A') as usize
            };
            // Positions are 1-based in the published algorithm: odd ones use the
            // permuted table, even ones the plain ordinal.
            if i % 2 == 0 {
                ODD_WEIGHTS[ordinal]
            } else {
                ordinal as u32
            }
        })
        .sum();
    (b'A' + (sum % 26) as u8) as char
}

pub fn decode(code: &str) -> Result<DecodedFiscalCode, FiscalCodeError> {
    let upper: Vec<u8> = code.trim().to_ascii_uppercase().into_bytes();
    if upper.len() != 16 || !upper.iter().all(u8::is_ascii_alphanumeric) {
        return Err(FiscalCodeError::BadLength);
    }
    for (i, &c) in upper.iter().enumerate().take(6) {
        if !c.is_ascii_alphabetic() {
            return Err(FiscalCodeError::Malformed(i));
        }
    }
    let expected = check_character(&upper[..15]);
    let found = upper[15] as char;
    if expected != found {
        return Err(FiscalCodeError::CheckMismatch { expected, found });
    }

    let mut plain = upper.clone();
    for pos in OMOCODIA_POSITIONS {
        let c = plain[pos];
        if c.is_ascii_digit() {
            continue;
        }
        let digit = OMOCODIA_LETTERS
            .iter()
            .position(|&l| l == c)
            .ok_or(FiscalCodeError::Malformed(pos))?;
        plain[pos] = b'0' + digit as u8;
    }

    let two_digits = |at: usize| -> Result<u32, FiscalCodeError> {
        let a = plain[at];
        let b = plain[at + 1];
        if !a.is_ascii_digit() || !b.is_ascii_digit() {
            return Err(FiscalCodeError::Malformed(at));
        }
        Ok(((a - b'0') * 10 + (b - b'0')) as u32)
    };

    let yy = two_digits(6)?;
    let month = MONTH_LETTERS
        .iter()
        .position(|&m| m == plain[8])
        .ok_or(FiscalCodeError::Malformed(8))? as u32
        + 1;
    let raw_day = two_digits(9)?;
    let (gender, day) = if raw_day > 40 {
        (Gender::Female, raw_day - 40)
    } else {
        (Gender::Male, raw_day)
    };
    if !plain[11].is_ascii_alphabetic() || !plain[12..15].iter().all(u8::is_ascii_digit) {
        return Err(FiscalCodeError::Malformed(11));
    }
    let year = if yy <= CENTURY_PIVOT { 2000 + yy } else { 1900 + yy };
    let birth_date =
        NaiveDate::from_ymd_opt(year as i32, month, day).ok_or(FiscalCodeError::BadDate)?;
    let birth_place_code = String::from_utf8(plain[11..15].to_vec()).expect("ascii");

    Ok(DecodedFiscalCode {
        birth_date,
        birth_place_code,
        gender,
    })
}
