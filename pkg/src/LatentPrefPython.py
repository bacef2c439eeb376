"""
Base module of LatentPrefPython: latent-space, step-level preference
optimization for a desk-scale diffusion model.

The functions contained in this module are helpers shared by every other
module: version constants, the exception classes with their error-code table,
and the Component class which the trainers, evaluators and the command-line
harness inherit from.

A typical user should start with harness.py (command line) or with the module
of the stage they need, such as lpo.py.
"""
import logging
import sys
import warnings


LATENTPREFPYTHON_VERSION = "1.0.0"
__version__ = LATENTPREFPYTHON_VERSION

# Values below this are treated as zero for norms, standard deviations and
# signal levels. Crossing it is an error unless a caller documents a clamp.
NUMERIC_FLOOR = 1e-12

# Tiny negative radicands from float error are clamped to zero above this.
RADICAND_TOLERANCE = -1e-12

# Error codes
NUMERIC_FAULT = 1
DEGENERATE_INPUT = 2
DEGENERATE_TIMESTEP = 3
SHAPE_MISMATCH = 4
CONFIG_ERROR = 5
CHECKPOINT_ERROR = 6
CHECKSUM_MISMATCH = 7
DIVERGENCE = 8
UNDEFINED_CORRELATION = 9
PATH_COLLISION = 10
DEGENERATE_SAMPLING = 11
USAGE_ERROR = 12

ERROR_TO_STRING_DICT = dict()
ERROR_TO_STRING_DICT['0'] = ("NO_ERROR", "")
ERROR_TO_STRING_DICT['1'] = ("NUMERIC_FAULT", "A forward value became NaN or infinite, or a square-root argument was negative. Lower the learning rate or check the schedule.")
ERROR_TO_STRING_DICT['2'] = ("DEGENERATE_INPUT", "An input was below the numeric floor (1e-12) where a nonzero value is required.")
ERROR_TO_STRING_DICT['3'] = ("DEGENERATE_TIMESTEP", "The cumulative signal level of this timestep is below the numeric floor.")
ERROR_TO_STRING_DICT['4'] = ("SHAPE_MISMATCH", "")
ERROR_TO_STRING_DICT['5'] = ("CONFIG_ERROR", "Check the key names and value ranges in the run configuration.")
ERROR_TO_STRING_DICT['6'] = ("CHECKPOINT_ERROR", "")
ERROR_TO_STRING_DICT['7'] = ("CHECKSUM_MISMATCH", "The stored CRC32 does not match the payload. The file is corrupt or truncated.")
ERROR_TO_STRING_DICT['8'] = ("DIVERGENCE", "The loss stayed above 10x its initial value. Lower the learning rate.")
ERROR_TO_STRING_DICT['9'] = ("UNDEFINED_CORRELATION", "Pearson correlation is undefined for constant input.")
ERROR_TO_STRING_DICT['10'] = ("PATH_COLLISION", "Refusing to overwrite existing output. Choose another --out directory.")
ERROR_TO_STRING_DICT['11'] = ("DEGENERATE_SAMPLING", "")
ERROR_TO_STRING_DICT['12'] = ("USAGE_ERROR", "")


def errorToString(errorcode):
    """Converts an error code into a string.

    >>> errorToString(9)
    'UNDEFINED_CORRELATION (9)\\nPearson correlation is undefined for constant input.'
    """
    try:
        name, advice = ERROR_TO_STRING_DICT[str(errorcode)]
    except KeyError:
        name = "UNKNOWN_ERROR"
        advice = "Unrecognized error code (%s)" % errorcode

    if advice != "":
        msg = "%s (%s)\n%s" % (name, errorcode, advice)
    else:
        msg = "%s (%s)" % (name, errorcode)

    return msg


def errorName(errorcode):
    """Returns only the symbolic name of an error code."""
    try:
        return ERROR_TO_STRING_DICT[str(errorcode)][0]
    except KeyError:
        return "UNKNOWN_ERROR"


class LatentPrefException(Exception):
    """Custom Exception meant for dealing specifically with LatentPrefPython
    errors.

    errorCode is one of the codes in ERROR_TO_STRING_DICT. If errorString is
    not specified then errorString is set by errorCode.
    """
    def __init__(self, ec = 0, errorString = ''):
        self.errorCode = ec
        self.errorString = errorString

        if not self.errorString:
            self.errorString = errorToString(self.errorCode)

    def __str__(self):
        return self.errorString


class NumericFaultException(LatentPrefException):
    """Raised when a value leaves the finite domain."""
    def __init__(self, errorString = ''):
        LatentPrefException.__init__(self, NUMERIC_FAULT, errorString)


class DegenerateInputException(LatentPrefException):
    """Raised when an input sits below the numeric floor."""
    def __init__(self, errorString = '', ec = DEGENERATE_INPUT):
        LatentPrefException.__init__(self, ec, errorString)


class ShapeException(LatentPrefException):
    """Raised when tensor shapes do not agree."""
    def __init__(self, errorString = ''):
        LatentPrefException.__init__(self, SHAPE_MISMATCH, errorString)


class ConfigException(LatentPrefException):
    """Raised for unknown keys, bad values or violated invariants."""
    def __init__(self, errorString = ''):
        LatentPrefException.__init__(self, CONFIG_ERROR, errorString)


class CheckpointException(LatentPrefException):
    """Raised when a checkpoint or dataset frame can't be decoded."""
    def __init__(self, errorString = '', ec = CHECKPOINT_ERROR):
        LatentPrefException.__init__(self, ec, errorString)


class DivergenceException(LatentPrefException):
    """Raised when a training loop aborts on a diverging loss.

    lossCurve holds the losses recorded up to the abort.
    """
    def __init__(self, errorString = '', lossCurve = None):
        LatentPrefException.__init__(self, DIVERGENCE, errorString)
        self.lossCurve = lossCurve


class PathCollisionException(LatentPrefException):
    """Raised when an output file already exists."""
    def __init__(self, path):
        LatentPrefException.__init__(self, PATH_COLLISION, "Output already exists: %s" % path)
        self.path = path


class DegenerateSamplingWarning(UserWarning):
    """Issued when sampling produces nothing usable (identical candidates,
    no qualified pairs). Training continues."""
    pass


def warnDegenerate(msg):
    warnings.warn(msg, DegenerateSamplingWarning, stacklevel = 3)


class Component(object):
    """Component(debug = False)

    Base class for the long-running objects (trainers, evaluators, the
    command-line harness).

    debug is False, True (for stdout) or a logging.Logger.
    """
    def __init__(self, debug = False):
        self.debug = debug

    def _debugprint(self, msg):
        """Conditionally output msg.

        If self.debug is a logging.Logger object, send the msg to it with
        DEBUG priority.  Otherwise, if self.debug is any truthy, just print
        it to stdout.
        """
        if self.debug:
            if isinstance(self.debug, logging.Logger):
                self.debug.debug(msg)
            else:
                print(msg)
                sys.stdout.flush()


def makeLogger(verbose = False, stream = None):
    """
    Name: makeLogger(verbose = False, stream = None)
    Args: verbose, True for DEBUG level output
          stream, where to write (stderr by default)
    Desc: Builds the "latentpref" logger used by the command line harness.
    """
    logger = logging.getLogger("latentpref")
    logger.handlers = []
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False
    return logger
