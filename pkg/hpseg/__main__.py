from .commands import hpseg

if __name__ == '__main__':
    hpseg(prog_name='hpseg')
