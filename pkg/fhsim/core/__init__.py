# Core modules for fhsim: logging
