pub mod error;
pub mod quad;
pub mod special;
pub mod timefn;
pub mod volmodel;
pub mod simulate;
pub mod defaultclock;
pub mod valuation;
pub mod mildsolver;
