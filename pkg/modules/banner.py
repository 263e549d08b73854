from modules import __version__


def print_banner():
    banner_text = r"""
     ___ _ __ ___  _ __ ___   ___| | _(_) |_
    / __| '__/ _ \| '_ ` _ \ / _ \ |/ / | __|
   | (__| | | (_) | | | | | |  __/   <| | |_
    \___|_|  \___/|_| |_| |_|\___|_|\_\_|\__|

    C R O M E K I T  -  Multimodal Fake-News Detection
    metric learning + cross-modal tri-transformer fusion
----------------------------------------------------------"""
    print(banner_text)
    print(f"    version {__version__}\n")
