TEMPLATE = """
def not_a_function():
    return "this is inside a string"
"""


def main():
    """Print a rendered template; the def inside TEMPLATE is text, not code."""
    print(render(TEMPLATE, {"x": '"quoted" # not a comment'}))


def render(template, values):
    """Substitute {key} markers; braces in f-strings: {{literal}}."""
    out = template
    for k, v in values.items():
        out = out.replace("{" + k + "}", escape(v))
    return out + f"{len(values)} {{done}}"


def escape(s):
    r"""Escape backslashes: \ and quotes \" ."""
    return s.replace("\\", "\\\\").replace('"', '\\"')
