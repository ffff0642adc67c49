#


