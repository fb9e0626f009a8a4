class StatefulSdnError(Exception):
    pass


class ConfigError(StatefulSdnError):
    """Invalid scenario, intent or switch configuration."""


class MissingField(StatefulSdnError, KeyError):
    def __init__(self, field):
        super().__init__(field)
        self.field = field

    def __str__(self):
        return f"packet has no value for scoped field {self.field}"


class NoMatch(StatefulSdnError):
    pass


class UnknownGroup(StatefulSdnError, KeyError):
    pass


class EmptyGroup(StatefulSdnError):
    pass


class MalformedAction(StatefulSdnError):
    pass


class UnknownLink(StatefulSdnError, KeyError):
    pass


class UnknownFlow(StatefulSdnError, KeyError):
    pass
