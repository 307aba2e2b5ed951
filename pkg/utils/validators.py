"""
Validators for experiment configuration values
Every check returns (ok, value_or_message)
"""

import os
import re

# run ids end up in file names
RUN_ID_PATTERN = re.compile(r'^[A-Za-z0-9_.+=-]+$')


class InputValidator:
    def validate_integer(self, value, min_val=None, max_val=None):
        """Validate an integer, rejecting bools and floats"""
        if isinstance(value, bool) or not isinstance(value, int):
            return False, f"must be an integer, got {type(value).__name__}"
        if min_val is not None and value < min_val:
            return False, f"must be at least {min_val}"
        if max_val is not None and value > max_val:
            return False, f"must be at most {max_val}"
        return True, value

    def validate_positive_integer(self, value, min_val=1, max_val=None):
        return self.validate_integer(value, min_val, max_val)

    def validate_optional_integer(self, value, min_val=None, max_val=None):
        if value is None:
            return True, None
        return self.validate_integer(value, min_val, max_val)

    def validate_float(self, value, min_val=None, max_val=None, min_exclusive=False):
        """Validate a real number; integers are accepted and widened"""
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False, f"must be a number, got {type(value).__name__}"
        value = float(value)
        if value != value:
            return False, "must not be NaN"
        if min_val is not None:
            if min_exclusive and value <= min_val:
                return False, f"must be greater than {min_val}"
            if not min_exclusive and value < min_val:
                return False, f"must be at least {min_val}"
        if max_val is not None and value > max_val:
            return False, f"must be at most {max_val}"
        return True, value

    def validate_bool(self, value):
        if not isinstance(value, bool):
            return False, f"must be true or false, got {type(value).__name__}"
        return True, value

    def validate_choice(self, value, choices):
        if value not in choices:
            return False, f"must be one of {', '.join(map(str, choices))}, got {value!r}"
        return True, value

    def validate_integer_list(self, value, min_val=None, max_val=None, allow_empty=True):
        if not isinstance(value, (list, tuple)):
            return False, f"must be a list of integers, got {type(value).__name__}"
        if not value and not allow_empty:
            return False, "must not be empty"
        out = []
        for item in value:
            ok, result = self.validate_integer(item, min_val, max_val)
            if not ok:
                return False, f"entry {item!r} {result}"
            out.append(result)
        return True, out

    def validate_choice_list(self, value, choices, allow_empty=False):
        if not isinstance(value, (list, tuple)):
            return False, f"must be a list, got {type(value).__name__}"
        if not value and not allow_empty:
            return False, "must not be empty"
        for item in value:
            if item not in choices:
                return False, f"entry {item!r} must be one of {', '.join(choices)}"
        return True, list(value)

    def validate_optional_path(self, value):
        if value is None:
            return True, None
        if not isinstance(value, str) or not value.strip():
            return False, "must be a non-empty path string"
        return True, os.path.expanduser(value)


class FileValidator:
    def is_valid_run_id(self, run_id):
        """Run ids become file names, so keep them to a portable character set"""
        if not run_id:
            return False, "run id cannot be empty"
        if not RUN_ID_PATTERN.match(run_id):
            return False, f"run id {run_id!r} has characters outside [A-Za-z0-9_.+=-]"
        return True, run_id

    def is_writable_directory(self, path):
        """Check that ``path`` is (or can become) a writable directory"""
        if not path:
            return False, "Path cannot be empty"
        if os.path.exists(path):
            if not os.path.isdir(path):
                return False, "Path exists but is not a directory"
            if not os.access(path, os.W_OK):
                return False, "No write permission for directory"
            return True, path
        parent = os.path.dirname(os.path.abspath(path))
        while not os.path.exists(parent):
            parent = os.path.dirname(parent)
        if not os.path.isdir(parent):
            return False, f"{parent} is not a directory"
        if not os.access(parent, os.W_OK):
            return False, f"No write permission for {parent}"
        return True, path
