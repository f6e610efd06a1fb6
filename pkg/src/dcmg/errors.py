"""Exception hierarchy. Every error raised by the package derives from DcmgError."""


class DcmgError(Exception):
    pass


class ConfigError(DcmgError):
    """Invalid or inconsistent microgrid description."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.message = message
        self.field = field
        self.line = line

    def __str__(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field is not None:
            where.append(f"field '{self.field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        return prefix + self.message


class GraphError(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class MissingGains(ConfigError):
    pass


class NonPositiveVoltage(DcmgError):
    def __init__(self, buses, values):
        self.buses = list(buses)
        self.values = list(values)
        super().__init__(
            "bus voltage at or below the admissible minimum: "
            + ", ".join(f"bus {b + 1}: {v:.6g} V" for b, v in zip(self.buses, self.values))
        )


class RankDeficient(DcmgError):
    pass


class SingularNominal(DcmgError):
    """The nominal (load-free) voltage has a zero or negative entry."""

    def __init__(self, buses, values):
        self.buses = list(buses)
        self.values = list(values)
        super().__init__(
            "nominal voltage is not strictly positive at "
            + ", ".join(f"bus {b + 1} ({v:.6g} V)" for b, v in zip(self.buses, self.values))
        )


class NoCertificate(DcmgError):
    pass


class NoConvergence(DcmgError):
    pass


class OutOfBand(DcmgError):
    pass


class SingularGamma(DcmgError):
    pass


class NotSettled(DcmgError):
    pass
